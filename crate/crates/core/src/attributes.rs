//! Deterministic image measures: colorfulness, an exposure class from mean
//! luminance, and distance of a subject from the nearest rule-of-thirds point.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::rgb_to_map;
use crate::tensor::FeatureMap;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("image"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{} pixels for {width}x{height}", pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self {
            pixels,
            ..*self
        }
    }

    pub fn to_map(&self) -> Result<FeatureMap> {
        rgb_to_map(self.width, self.height, &self.pixels)
    }

    /// Binary PPM (P6, maxval 255).
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "ppm",
            detail: detail.into(),
        };
        let mut reader = BufReader::new(bytes);
        let mut fields = Vec::with_capacity(4);
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if reader.read_line(&mut line).map_err(|e| bad(&e.to_string()))? == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields.len() > 4 {
            return Err(bad("unexpected data after header"));
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw).map_err(|e| bad(&e.to_string()))?;
        if raw.len() != width * height * 3 {
            return Err(bad(&format!(
                "expected {} pixel bytes, found {}",
                width * height * 3,
                raw.len()
            )));
        }
        let pixels = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(width, height, pixels)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Colorfulness from opponent channels `rg = R − G` and `yb = (R + G)/2 − B`:
/// `sqrt(σ_rg² + σ_yb²) + 0.3·sqrt(μ_rg² + μ_yb²)` with population moments.
pub fn colorfulness(img: &Image) -> Result<f64> {
    if img.pixels.is_empty() {
        return Err(Error::Empty("colorfulness"));
    }
    let n = img.pixels.len() as f64;
    let opp = |p: &[u8; 3]| {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        (r - g, (r + g) / 2.0 - b)
    };
    let (mut mrg, mut myb) = (0.0, 0.0);
    for p in &img.pixels {
        let (rg, yb) = opp(p);
        mrg += rg;
        myb += yb;
    }
    mrg /= n;
    myb /= n;
    let (mut vrg, mut vyb) = (0.0, 0.0);
    for p in &img.pixels {
        let (rg, yb) = opp(p);
        vrg += (rg - mrg) * (rg - mrg);
        vyb += (yb - myb) * (yb - myb);
    }
    vrg /= n;
    vyb /= n;
    Ok((vrg + vyb).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt())
}

/// Boundaries between the seven colorfulness levels, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorfulnessScale {
    pub thresholds: [f64; 6],
}

impl Default for ColorfulnessScale {
    fn default() -> Self {
        Self {
            thresholds: [15.0, 33.0, 45.0, 59.0, 82.0, 109.0],
        }
    }
}

impl ColorfulnessScale {
    pub fn new(thresholds: [f64; 6]) -> Result<Self> {
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) || !thresholds[0].is_finite() {
            return Err(Error::invalid(
                "colorfulness_scale",
                "thresholds must be finite and strictly increasing",
            ));
        }
        Ok(Self { thresholds })
    }

    /// Level 0..=6 with half-open buckets `[lo, hi)`.
    pub fn level(&self, m: f64) -> Result<u8> {
        if !(m >= 0.0) {
            return Err(Error::invalid("colorfulness_level", format!("M must be >= 0, got {m}")));
        }
        Ok(self.thresholds.iter().filter(|&&t| m >= t).count() as u8)
    }
}

pub fn colorfulness_level(m: f64) -> Result<u8> {
    ColorfulnessScale::default().level(m)
}

pub const EXPOSURE_EDGES: [f64; 4] = [51.0, 102.0, 153.0, 204.0];

pub fn luminance(p: [u8; 3]) -> f64 {
    0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64
}

pub fn mean_luminance(img: &Image) -> Result<f64> {
    if img.pixels.is_empty() {
        return Err(Error::Empty("mean_luminance"));
    }
    Ok(img.pixels.iter().map(|&p| luminance(p)).sum::<f64>() / img.pixels.len() as f64)
}

/// Exposure class 0..=4 from mean luminance, half-open bins.
pub fn exposure_bin(img: &Image) -> Result<u8> {
    let y = mean_luminance(img)?;
    Ok(EXPOSURE_EDGES.iter().filter(|&&e| y >= e).count() as u8)
}

/// Distance from `centroid` (continuous pixel coordinates, `[0, w] x [0, h]`)
/// to the nearest rule-of-thirds intersection, divided by the largest such
/// distance any point can have, which is reached at a corner: `sqrt(w² + h²)/3`.
pub fn composition_offset(img: &Image, centroid: (f64, f64)) -> Result<f64> {
    offset_in_frame(img.width as f64, img.height as f64, centroid)
}

pub fn offset_in_frame(w: f64, h: f64, (cx, cy): (f64, f64)) -> Result<f64> {
    if !(0.0..=w).contains(&cx) || !(0.0..=h).contains(&cy) {
        return Err(Error::invalid(
            "composition_offset",
            format!("centroid ({cx}, {cy}) outside {w}x{h} frame"),
        ));
    }
    let mut best = f64::INFINITY;
    for tx in [w / 3.0, 2.0 * w / 3.0] {
        for ty in [h / 3.0, 2.0 * h / 3.0] {
            best = best.min((cx - tx).hypot(cy - ty));
        }
    }
    Ok((best / (w.hypot(h) / 3.0)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeLabels {
    pub colorfulness_value: f64,
    pub colorfulness_level: u8,
    pub exposure_class: u8,
    pub composition_offset: f64,
}

pub fn label_image(img: &Image, centroid: (f64, f64), scale: &ColorfulnessScale) -> Result<AttributeLabels> {
    let m = colorfulness(img)?;
    Ok(AttributeLabels {
        colorfulness_value: m,
        colorfulness_level: scale.level(m)?,
        exposure_class: exposure_bin(img)?,
        composition_offset: composition_offset(img, centroid)?,
    })
}

//! Seeded synthetic scenes whose score is a closed-form function of measurable
//! image attributes, plus the line-delimited manifest that binds them to labels.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributes::{
    colorfulness, composition_offset, exposure_bin, mean_luminance, ColorfulnessScale, Image,
};
use crate::error::{Error, Result};
use crate::losses::Label;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectShape {
    Circle,
    Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Hue in `[0, 1)`, saturation and value in `[0, 1]`.
    pub background_hsv: [f64; 3],
    pub subject_shape: SubjectShape,
    pub subject_rgb: [u8; 3],
    /// Continuous pixel coordinates, inside `[0, w] x [0, h]`.
    pub centroid: (f64, f64),
    /// Radius for circles, half side for squares, in pixels.
    pub size: f64,
    /// Per-channel uniform noise amplitude in 8-bit levels, `[0, 64]`.
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("scene_spec", d));
        if self.width == 0 || self.height == 0 {
            return bad("empty frame".into());
        }
        let [h, s, v] = self.background_hsv;
        if !(0.0..1.0).contains(&h) || !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&v) {
            return bad(format!("background hsv {:?} out of range", self.background_hsv));
        }
        let (cx, cy) = self.centroid;
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return bad(format!("centroid {:?} outside frame", self.centroid));
        }
        if !(self.size >= 0.0 && self.size.is_finite()) {
            return bad(format!("subject size {} invalid", self.size));
        }
        if !(0.0..=64.0).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside [0, 64]", self.noise));
        }
        Ok(())
    }

    /// Draw a scene for a `side x side` frame.
    pub fn sample(rng: &mut impl Rng, side: usize) -> Self {
        let w = side as f64;
        let hue = rng.random_range(0.0..1.0);
        // saturation skewed low so that near-gray scenes are common
        let sat: f64 = rng.random_range(0.0f64..1.0).powi(2);
        let val = rng.random_range(0.0..=1.0);
        let subject_hsv = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0f64..1.0).powi(2),
            rng.random_range(0.0..=1.0),
        ];
        Self {
            width: side,
            height: side,
            background_hsv: [hue, sat, val],
            subject_shape: if rng.random_bool(0.5) {
                SubjectShape::Circle
            } else {
                SubjectShape::Rectangle
            },
            subject_rgb: hsv_to_rgb(subject_hsv),
            centroid: (rng.random_range(0.0..=w), rng.random_range(0.0..=w)),
            size: rng.random_range(w / 10.0..=w / 5.0),
            noise: rng.random_range(0.0..=24.0),
            seed: rng.random(),
        }
    }
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [u8; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Render a scene: background fill, one subject, additive uniform noise.
/// A pixel belongs to the subject when its centre lies inside the shape.
pub fn gen_image(spec: &SceneSpec) -> Result<Image> {
    spec.validate()?;
    let bg = hsv_to_rgb(spec.background_hsv);
    let (cx, cy) = spec.centroid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::with_capacity(spec.width * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match spec.subject_shape {
                SubjectShape::Circle => dx * dx + dy * dy <= spec.size * spec.size,
                SubjectShape::Rectangle => dx.abs() <= spec.size && dy.abs() <= spec.size,
            };
            let base = if inside { spec.subject_rgb } else { bg };
            let px = if spec.noise > 0.0 {
                base.map(|c| {
                    let n: f64 = rng.random_range(-spec.noise..=spec.noise);
                    (c as f64 + n).round().clamp(0.0, 255.0) as u8
                })
            } else {
                base
            };
            pixels.push(px);
        }
    }
    Image::new(spec.width, spec.height, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub color: f64,
    pub exposure: f64,
    pub composition: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            color: 0.4,
            exposure: 0.3,
            composition: 0.3,
        }
    }
}

/// Colorfulness at which the color term saturates.
pub const COLOR_SATURATION: f64 = 109.0;

/// `1 + 9·clamp01(w_c·min(M/109, 1) + w_e·(1 − |Y/255 − 0.5|·2) + w_k·(1 − offset))`.
pub fn score_from_measures(m: f64, y: f64, offset: f64, w: &ScoreWeights) -> f64 {
    let color = (m / COLOR_SATURATION).min(1.0);
    let exposure = 1.0 - (y / 255.0 - 0.5).abs() * 2.0;
    let comp = 1.0 - offset;
    1.0 + 9.0 * (w.color * color + w.exposure * exposure + w.composition * comp).clamp(0.0, 1.0)
}

pub fn true_score(img: &Image, spec: &SceneSpec, w: &ScoreWeights) -> Result<f64> {
    Ok(score_from_measures(
        colorfulness(img)?,
        mean_luminance(img)?,
        composition_offset(img, spec.centroid)?,
        w,
    ))
}

pub const DEFAULT_SIGMA: f64 = 0.75;

fn check_score(score: f64, buckets: usize) -> Result<()> {
    if !(1.0..=buckets as f64).contains(&score) {
        return Err(Error::invalid(
            "score_to_distribution",
            format!("score {score} outside [1, {buckets}]"),
        ));
    }
    Ok(())
}

fn gaussian_buckets(centre: f64, sigma: f64, buckets: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=buckets)
        .map(|k| {
            let d = (k as f64 - centre) / sigma;
            (-0.5 * d * d).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn bucket_mean(d: &[f64]) -> f64 {
    d.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum()
}

/// Gaussian weights at bucket centres `1..=B` around `score`, normalized.
pub fn score_to_distribution(score: f64, sigma: f64, buckets: usize) -> Result<Vec<f64>> {
    check_score(score, buckets)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid("score_to_distribution", "sigma must be > 0"));
    }
    Ok(gaussian_buckets(score, sigma, buckets))
}

/// Like [`score_to_distribution`], but the Gaussian centre is moved (by
/// bisection) so the histogram mean matches `score`, which corrects the
/// truncation pull near the ends of the scale.
pub fn calibrated_distribution(score: f64, sigma: f64, buckets: usize) -> Result<Vec<f64>> {
    let plain = score_to_distribution(score, sigma, buckets)?;
    if (bucket_mean(&plain) - score).abs() <= 1e-12 {
        return Ok(plain);
    }
    let (mut lo, mut hi) = (score - 4.0 * buckets as f64, score + 4.0 * buckets as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bucket_mean(&gaussian_buckets(mid, sigma, buckets)) < score {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(gaussian_buckets(0.5 * (lo + hi), sigma, buckets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// SHA-256 of the id, first 8 bytes as a big-endian integer, mod 10:
    /// 0..=7 train, 8 val, 9 test.
    pub fn of(id: &str) -> Self {
        let digest = Sha256::digest(id.as_bytes());
        let head = u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        match head % 10 {
            0..=7 => Self::Train,
            8 => Self::Val,
            _ => Self::Test,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub score: f64,
    pub distribution: Vec<f64>,
    pub colorfulness_level: u8,
    pub exposure_class: u8,
    pub composition_offset: f64,
}

impl ManifestRecord {
    pub fn split(&self) -> Split {
        Split::of(&self.id)
    }

    pub fn validate(&self, buckets: usize) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("manifest_record", format!("{}: {d}", self.id)));
        if !(1.0..=buckets as f64).contains(&self.score) {
            return bad(format!("score {} out of range", self.score));
        }
        if self.distribution.len() != buckets {
            return bad(format!("{} buckets, expected {buckets}", self.distribution.len()));
        }
        if self.distribution.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("negative or non-finite bucket".into());
        }
        let sum: f64 = self.distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("distribution sums to {sum}"));
        }
        if (bucket_mean(&self.distribution) - self.score).abs() > 0.2 {
            return bad("distribution mean too far from score".into());
        }
        if self.colorfulness_level > 6 || self.exposure_class > 4 {
            return bad("attribute class out of range".into());
        }
        if !(0.0..=1.0).contains(&self.composition_offset) {
            return bad(format!("composition offset {}", self.composition_offset));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Format {
                what: "manifest",
                detail: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parse every line. Lines that fail to parse are returned as errors in
    /// the second vector rather than aborting the read.
    pub fn read(path: &Path) -> Result<(Self, Vec<(usize, Error)>)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        let mut bad = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ManifestRecord>(&line) {
                Ok(r) => records.push(r),
                Err(e) => bad.push((
                    i + 1,
                    Error::Format {
                        what: "manifest line",
                        detail: e.to_string(),
                    },
                )),
            }
        }
        Ok((Self { root, records }, bad))
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split() as usize] += 1;
        }
        c
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: FeatureMap,
    pub label: Label,
}

/// Samples of one split in manifest order, and the number of records skipped
/// because they failed validation or their image could not be loaded.
pub fn load_split(
    manifest: &Manifest,
    split: Split,
    image_size: usize,
    buckets: usize,
) -> (Vec<Sample>, usize) {
    let loaded: Vec<Option<Sample>> = manifest
        .records
        .par_iter()
        .filter(|r| r.split() == split)
        .map(|r| {
            r.validate(buckets).ok()?;
            let img = Image::read_ppm(&manifest.root.join(&r.path)).ok()?;
            if img.width != image_size || img.height != image_size {
                return None;
            }
            Some(Sample {
                id: r.id.clone(),
                image: img.to_map().ok()?,
                label: Label {
                    score: r.score,
                    distribution: Some(r.distribution.clone()),
                },
            })
        })
        .collect();
    let skipped = loaded.iter().filter(|s| s.is_none()).count();
    (loaded.into_iter().flatten().collect(), skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub image_size: usize,
    pub sigma: f64,
    pub buckets: usize,
    pub weights: ScoreWeights,
    pub scale: ColorfulnessScale,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            sigma: DEFAULT_SIGMA,
            buckets: 10,
            weights: ScoreWeights::default(),
            scale: ColorfulnessScale::default(),
        }
    }
}

pub fn sample_id(seed: u64, index: usize) -> String {
    format!("s{seed}-{index:06}")
}

/// Scene for sample `index` of a dataset: stream `index` of the seed's
/// generator, so generation order does not matter.
pub fn scene_for(seed: u64, index: usize, side: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    SceneSpec::sample(&mut rng, side)
}

/// Render `n` scenes into `out_dir/images/` and write `out_dir/manifest.jsonl`.
pub fn make_dataset(n: usize, seed: u64, out_dir: &Path, cfg: &DatagenConfig) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("make_dataset", "n must be >= 1"));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = sample_id(seed, i);
            let spec = scene_for(seed, i, cfg.image_size);
            let img = gen_image(&spec)?;
            let score = true_score(&img, &spec, &cfg.weights)?;
            let rel = format!("images/{id}.ppm");
            img.write_ppm(&out_dir.join(&rel))?;
            Ok(ManifestRecord {
                id,
                path: rel,
                score,
                distribution: calibrated_distribution(score, cfg.sigma, cfg.buckets)?,
                colorfulness_level: cfg.scale.level(colorfulness(&img)?)?,
                exposure_class: exposure_bin(&img)?,
                composition_offset: composition_offset(&img, spec.centroid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

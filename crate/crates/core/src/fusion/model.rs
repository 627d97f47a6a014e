//! End-to-end network: a shared convolutional stem, one perception block per
//! branch over the multi-level stem features, then the interaction network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aap::{add_into, AapBlock, AapCache, AapVariant};
use super::net::{logits_backward, AttributeSet, FusionCache, FusionConfig, FusionNet, Prediction};
use crate::diffmath::activation::{relu_backward_in_place, relu_in_place};
use crate::diffmath::linear::min_abs;
use crate::diffmath::spatial::{concat_channels, slice_channels, window_pool, window_pool_backward, Conv2d, PoolMode};
use crate::error::{Error, Result};
use crate::tensor::{BlockParams, FeatureMap, GradStore, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Common spatial side of every branch map.
    pub grid: usize,
    pub stem_channels: [usize; 2],
    pub aap_width: usize,
    pub aap_variant: AapVariant,
    /// Append two coordinate channels to the multi-level map.
    pub positional: bool,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            grid: 4,
            stem_channels: [8, 16],
            aap_width: 16,
            aap_variant: AapVariant::Full,
            positional: true,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn multi_level_channels(&self) -> usize {
        3 + self.stem_channels[0] + self.stem_channels[1] + if self.positional { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        let s = self.image_size;
        if self.grid == 0 || !self.grid.is_multiple_of(2) {
            return Err(Error::invalid("model", "grid must be a positive even number"));
        }
        if !s.is_multiple_of(4) || !(s / 4).is_multiple_of(self.grid) {
            return Err(Error::invalid(
                "model",
                format!("image_size {s} must be divisible by 4 * grid ({})", 4 * self.grid),
            ));
        }
        if self.aap_width == 0 || self.stem_channels.contains(&0) {
            return Err(Error::invalid("model", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Convert 8-bit RGB pixels (row-major triples) into a `3 x H x W` map in `[0, 1]`.
pub fn rgb_to_map(width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<FeatureMap> {
    if pixels.len() != width * height {
        return Err(Error::shape("rgb_to_map", "pixel count differs from width*height"));
    }
    Ok(FeatureMap::from_fn(3, height, width, |c, y, x| {
        pixels[y * width + x][c] as f64 / 255.0
    }))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: BlockParams,
    stem: [Conv2d; 2],
    extractors: Vec<AapBlock>,
    fusion: FusionNet,
    /// Parameters with index below this belong to the stem and perception blocks.
    extractor_params: usize,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    image: FeatureMap,
    stage1: FeatureMap,
    stage2: FeatureMap,
    multi: FeatureMap,
    offsets: Vec<std::ops::Range<usize>>,
    aap: Vec<AapCache>,
    pub fusion: FusionCache,
    pub prediction: Prediction,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BlockParams::new();
        let [c1, c2] = cfg.stem_channels;
        let stem = [
            Conv2d::new(&mut params, "stem.conv1", 3, c1, 3, 2, 1, &mut rng)?,
            Conv2d::new(&mut params, "stem.conv2", c1, c2, 3, 2, 1, &mut rng)?,
        ];
        let multi = cfg.multi_level_channels();
        let mut extractors = Vec::new();
        for a in &cfg.fusion.attributes {
            extractors.push(AapBlock::new(
                &mut params,
                &format!("extract.{a}"),
                multi,
                cfg.aap_width,
                cfg.aap_variant,
                &mut rng,
            )?);
        }
        extractors.push(AapBlock::new(
            &mut params,
            "extract.generic",
            multi,
            cfg.aap_width,
            cfg.aap_variant,
            &mut rng,
        )?);
        let extractor_params = params.len();
        let widths: Vec<usize> = extractors.iter().map(AapBlock::out_channels).collect();
        let fusion = FusionNet::new(&mut params, "fusion", cfg.fusion.clone(), &widths, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            stem,
            extractors,
            fusion,
            extractor_params,
        })
    }

    pub fn is_extractor_param(&self, id: ParamId) -> bool {
        id.index() < self.extractor_params
    }

    fn positional(&self) -> FeatureMap {
        let g = self.cfg.grid;
        FeatureMap::from_fn(2, g, g, |c, y, x| {
            let v = if c == 0 { x } else { y };
            2.0 * (v as f64 + 0.5) / g as f64 - 1.0
        })
    }

    fn check_image(&self, image: &FeatureMap) -> Result<()> {
        let s = self.cfg.image_size;
        if image.channels != 3 || image.height != s || image.width != s {
            return Err(Error::shape(
                "model",
                format!(
                    "expected 3x{s}x{s} image, got {}x{}x{}",
                    image.channels, image.height, image.width
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<(Prediction, ModelCache)> {
        self.check_image(image)?;
        let g = self.cfg.grid;
        let p = &self.params;
        let mut stage1 = self.stem[0].forward(p, image)?;
        relu_in_place(&mut stage1.data);
        let mut stage2 = self.stem[1].forward(p, &stage1)?;
        relu_in_place(&mut stage2.data);

        let (r0, _) = window_pool(image, image.height / g, PoolMode::Avg)?;
        let (r1, _) = window_pool(&stage1, stage1.height / g, PoolMode::Avg)?;
        let (r2, _) = window_pool(&stage2, stage2.height / g, PoolMode::Avg)?;
        let pos = self.positional();
        let mut parts = vec![&r0, &r1, &r2];
        if self.cfg.positional {
            parts.push(&pos);
        }
        let (multi, offsets) = concat_channels(&parts)?;

        let mut maps = Vec::with_capacity(self.extractors.len());
        let mut aap = Vec::with_capacity(self.extractors.len());
        for block in &self.extractors {
            let (m, c) = block.forward(p, &multi)?;
            maps.push(m);
            aap.push(c);
        }
        let generic = maps.pop().expect("generic branch always present");
        let set = AttributeSet {
            attributes: self.cfg.fusion.attributes.iter().copied().zip(maps).collect(),
            generic,
        };
        let (prediction, fusion) = self.fusion.forward(p, &set)?;
        Ok((
            prediction.clone(),
            ModelCache {
                image: image.clone(),
                stage1,
                stage2,
                multi,
                offsets,
                aap,
                fusion,
                prediction,
            },
        ))
    }

    pub fn predict(&self, image: &FeatureMap) -> Result<Prediction> {
        Ok(self.forward(image)?.0)
    }

    /// Distance of a forward pass from the nearest ReLU or max-pool kink.
    pub(crate) fn kink_margin(&self, cache: &ModelCache) -> Result<f64> {
        let p = &self.params;
        let mut m = min_abs(&self.stem[0].forward(p, &cache.image)?.data);
        m = m.min(min_abs(&self.stem[1].forward(p, &cache.stage1)?.data));
        for block in &self.extractors {
            m = m.min(block.kink_margin(p, &cache.multi)?);
        }
        Ok(m.min(self.fusion.kink_margin(p, &cache.fusion)?))
    }

    /// Accumulate parameter gradients for a loss gradient on the prediction.
    ///
    /// With `train_extractors = false` the pass stops at the fusion network.
    pub fn backward(
        &self,
        grads: &mut GradStore,
        cache: &ModelCache,
        d_score: f64,
        d_dist: Option<&[f64]>,
        train_extractors: bool,
    ) -> Result<()> {
        let p = &self.params;
        let d_logits = logits_backward(cache.fusion.logits(), &cache.prediction, d_score, d_dist);
        let d_maps = self.fusion.backward(p, grads, &cache.fusion, &d_logits)?;
        if !train_extractors {
            return Ok(());
        }
        let m = &cache.multi;
        let mut d_multi = FeatureMap::zeros(m.channels, m.height, m.width);
        for ((block, c), d) in self.extractors.iter().zip(&cache.aap).zip(&d_maps) {
            add_into(&mut d_multi, &block.backward(p, grads, m, c, d)?);
        }
        let g = self.cfg.grid;
        let s2 = &cache.stage2;
        let d_r2 = slice_channels(&d_multi, cache.offsets[2].clone())?;
        let mut d_s2 = window_pool_backward((s2.channels, s2.height, s2.width), s2.height / g, PoolMode::Avg, &[], &d_r2);
        relu_backward_in_place(&s2.data, &mut d_s2.data);
        let mut d_s1 = self.stem[1].backward(p, grads, &cache.stage1, &d_s2);
        let s1 = &cache.stage1;
        let d_r1 = slice_channels(&d_multi, cache.offsets[1].clone())?;
        add_into(
            &mut d_s1,
            &window_pool_backward((s1.channels, s1.height, s1.width), s1.height / g, PoolMode::Avg, &[], &d_r1),
        );
        relu_backward_in_place(&s1.data, &mut d_s1.data);
        self.stem[0].backward(p, grads, &cache.image, &d_s1);
        Ok(())
    }
}

//! Channel attention over the concatenated attribute maps:
//! `h = sigmoid(MLP(maxpool(c)) + MLP(avgpool(c))) ⊙ c` with one shared MLP.

use rand::Rng;

use crate::diffmath::activation::sigmoid_scalar;
use crate::diffmath::linear::{hidden_width, Mlp, MlpCache};
use crate::diffmath::spatial::{max_pool_gap, spatial_pool, PoolMode};
use crate::error::{Error, Result};
use crate::tensor::{BlockParams, FeatureMap, GradStore};

/// Per-channel weights in (0, 1) and the reweighted map.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub weights: Vec<f64>,
    pub h: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub mlp: Mlp,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    max_vec: Vec<f64>,
    max_argmax: Vec<usize>,
    avg_vec: Vec<f64>,
    max_mlp: MlpCache,
    avg_mlp: MlpCache,
}

impl ChannelAttention {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = hidden_width(channels, reduction);
        Ok(Self {
            mlp: Mlp::new(params, &format!("{name}.mlp"), channels, hidden, channels, rng)?,
            channels,
        })
    }

    pub fn forward(
        &self,
        params: &BlockParams,
        c: &FeatureMap,
    ) -> Result<(AttentionRecord, AttentionCache)> {
        if c.channels != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("expected {} channels, got {}", self.channels, c.channels),
            ));
        }
        let (max_vec, max_argmax) = spatial_pool(c, PoolMode::Max)?;
        let (avg_vec, _) = spatial_pool(c, PoolMode::Avg)?;
        let (a, max_mlp) = self.mlp.forward(params, &max_vec)?;
        let (b, avg_mlp) = self.mlp.forward(params, &avg_vec)?;
        let weights: Vec<f64> = a.iter().zip(&b).map(|(x, y)| sigmoid_scalar(x + y)).collect();
        let plane = c.plane();
        let mut h = c.clone();
        for (ch, w) in weights.iter().enumerate() {
            h.data[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v *= w);
        }
        Ok((
            AttentionRecord { weights, h },
            AttentionCache {
                max_vec,
                max_argmax,
                avg_vec,
                max_mlp,
                avg_mlp,
            },
        ))
    }

    pub(crate) fn kink_margin(&self, params: &BlockParams, c: &FeatureMap) -> Result<f64> {
        let (max_vec, _) = spatial_pool(c, PoolMode::Max)?;
        let (avg_vec, _) = spatial_pool(c, PoolMode::Avg)?;
        Ok(max_pool_gap(c, None)
            .min(self.mlp.kink_margin(params, &max_vec)?)
            .min(self.mlp.kink_margin(params, &avg_vec)?))
    }

    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        c: &FeatureMap,
        record: &AttentionRecord,
        cache: &AttentionCache,
        dh: &FeatureMap,
    ) -> FeatureMap {
        let plane = c.plane();
        let mut dc = FeatureMap::zeros(c.channels, c.height, c.width);
        let mut ds = vec![0.0; c.channels];
        for ch in 0..c.channels {
            let w = record.weights[ch];
            let src = c.channel(ch);
            let g = &dh.data[ch * plane..(ch + 1) * plane];
            let dst = &mut dc.data[ch * plane..(ch + 1) * plane];
            let mut dw = 0.0;
            for i in 0..plane {
                dst[i] = w * g[i];
                dw += g[i] * src[i];
            }
            ds[ch] = dw * w * (1.0 - w);
        }
        let d_max = self.mlp.backward(params, grads, &cache.max_vec, &cache.max_mlp, &ds);
        let d_avg = self.mlp.backward(params, grads, &cache.avg_vec, &cache.avg_mlp, &ds);
        for ch in 0..c.channels {
            let dst = &mut dc.data[ch * plane..(ch + 1) * plane];
            dst[cache.max_argmax[ch]] += d_max[ch];
            let a = d_avg[ch] / plane as f64;
            dst.iter_mut().for_each(|v| *v += a);
        }
        dc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_gives_half_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = BlockParams::new();
        let att = ChannelAttention::new(&mut p, "att", 6, 16, &mut rng).unwrap();
        for (_, t) in p.iter_mut() {
            t.fill(0.0);
        }
        let c = FeatureMap::from_fn(6, 2, 3, |ch, y, x| (ch as f64 - 2.0) * (y + x) as f64);
        let (rec, _) = att.forward(&p, &c).unwrap();
        assert!(rec.weights.iter().all(|&w| w == 0.5));
        for (h, c) in rec.h.data.iter().zip(&c.data) {
            assert_eq!(*h, 0.5 * c);
        }
    }

    #[test]
    fn constant_channels_pool_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = BlockParams::new();
        let att = ChannelAttention::new(&mut p, "att", 4, 16, &mut rng).unwrap();
        let values = [0.3, -1.1, 2.0, 0.7];
        let c = FeatureMap::from_fn(4, 3, 3, |ch, _, _| values[ch]);
        let (rec, _) = att.forward(&p, &c).unwrap();
        let (v, _) = att.mlp.forward(&p, &values).unwrap();
        for (w, m) in rec.weights.iter().zip(&v) {
            assert!((w - sigmoid_scalar(2.0 * m)).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_inside_unit_interval_and_h_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = BlockParams::new();
        let att = ChannelAttention::new(&mut p, "att", 8, 16, &mut rng).unwrap();
        let c = FeatureMap::from_fn(8, 4, 4, |_, _, _| rng.random_range(-3.0..3.0));
        let (rec, _) = att.forward(&p, &c).unwrap();
        assert!(rec.weights.iter().all(|&w| w > 0.0 && w < 1.0));
        assert!(rec.h.data.iter().zip(&c.data).all(|(h, c)| h.abs() <= c.abs()));
    }
}

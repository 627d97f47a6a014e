//! Attribute perception block: a convolution branch and a dual-pooling branch over a
//! multi-level feature map.
//!
//! Conv branch: 3x3 conv (same padding) -> ReLU -> 1x1 conv -> ReLU.
//! Pool branch: concat(avg-pool 2x2, max-pool 2x2) -> 1x1 projection -> ReLU ->
//! nearest upsample back to the input grid.
//!
//! Both branches are always allocated; the variant only routes the forward pass,
//! so every variant shares one parameter layout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::activation::{relu_backward_in_place, relu_in_place};
use crate::diffmath::linear::min_abs;
use crate::diffmath::spatial::{
    concat_channels, max_pool_gap, slice_channels, upsample_nearest, upsample_nearest_backward, window_pool,
    window_pool_backward, Conv2d, PoolMode, Projection,
};
use crate::error::{Error, Result};
use crate::tensor::{BlockParams, FeatureMap, GradStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AapVariant {
    #[default]
    Full,
    NoCnn,
    NoPool,
}

impl FromStr for AapVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_cnn" => Ok(Self::NoCnn),
            "no_pool" => Ok(Self::NoPool),
            other => Err(Error::invalid(
                "aap_block",
                format!("unknown variant `{other}` (expected full, no_cnn or no_pool)"),
            )),
        }
    }
}

impl fmt::Display for AapVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoCnn => "no_cnn",
            Self::NoPool => "no_pool",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AapBlock {
    pub variant: AapVariant,
    pub in_channels: usize,
    pub width: usize,
    conv3: Conv2d,
    conv1: Conv2d,
    pool_proj: Projection,
}

#[derive(Debug, Clone)]
pub struct AapCache {
    conv_mid: Option<FeatureMap>,
    conv_out: Option<FeatureMap>,
    pooled: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    cat: FeatureMap,
    proj: FeatureMap,
    max_argmax: Vec<usize>,
}

impl AapBlock {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        in_channels: usize,
        width: usize,
        variant: AapVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            variant,
            in_channels,
            width,
            conv3: Conv2d::new(params, &format!("{name}.conv3"), in_channels, width, 3, 1, 1, rng)?,
            conv1: Conv2d::new(params, &format!("{name}.conv1"), width, width, 1, 1, 0, rng)?,
            pool_proj: Projection::new(params, &format!("{name}.pool_proj"), 2 * in_channels, width, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        match self.variant {
            AapVariant::Full => 2 * self.width,
            AapVariant::NoCnn | AapVariant::NoPool => self.width,
        }
    }

    fn uses_conv(&self) -> bool {
        self.variant != AapVariant::NoCnn
    }

    fn uses_pool(&self) -> bool {
        self.variant != AapVariant::NoPool
    }

    pub fn forward(&self, params: &BlockParams, x: &FeatureMap) -> Result<(FeatureMap, AapCache)> {
        if x.channels != self.in_channels {
            return Err(Error::shape(
                "aap_block",
                format!("expected {} channels, got {}", self.in_channels, x.channels),
            ));
        }
        let mut cache = AapCache {
            conv_mid: None,
            conv_out: None,
            pooled: None,
        };
        let mut parts = Vec::with_capacity(2);
        if self.uses_conv() {
            let mut mid = self.conv3.forward(params, x)?;
            relu_in_place(&mut mid.data);
            let mut out = self.conv1.forward(params, &mid)?;
            relu_in_place(&mut out.data);
            cache.conv_mid = Some(mid);
            parts.push(out.clone());
            cache.conv_out = Some(out);
        }
        if self.uses_pool() {
            let (avg, _) = window_pool(x, 2, PoolMode::Avg)?;
            let (max, max_argmax) = window_pool(x, 2, PoolMode::Max)?;
            let (cat, _) = concat_channels(&[&avg, &max])?;
            let mut proj = self.pool_proj.forward(params, &cat)?;
            relu_in_place(&mut proj.data);
            parts.push(upsample_nearest(&proj, 2));
            cache.pooled = Some(PoolCache {
                cat,
                proj,
                max_argmax,
            });
        }
        let refs: Vec<&FeatureMap> = parts.iter().collect();
        let (out, _) = concat_channels(&refs)?;
        Ok((out, cache))
    }

    /// Distance of `x` from the nearest ReLU or max-pool kink of the routed branches.
    pub(crate) fn kink_margin(&self, params: &BlockParams, x: &FeatureMap) -> Result<f64> {
        let mut m = f64::INFINITY;
        if self.uses_conv() {
            let mut mid = self.conv3.forward(params, x)?;
            m = m.min(min_abs(&mid.data));
            relu_in_place(&mut mid.data);
            m = m.min(min_abs(&self.conv1.forward(params, &mid)?.data));
        }
        if self.uses_pool() {
            m = m.min(max_pool_gap(x, Some(2)));
            let (avg, _) = window_pool(x, 2, PoolMode::Avg)?;
            let (max, _) = window_pool(x, 2, PoolMode::Max)?;
            let (cat, _) = concat_channels(&[&avg, &max])?;
            m = m.min(min_abs(&self.pool_proj.forward(params, &cat)?.data));
        }
        Ok(m)
    }

    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        x: &FeatureMap,
        cache: &AapCache,
        dy: &FeatureMap,
    ) -> Result<FeatureMap> {
        let dims = (x.channels, x.height, x.width);
        let mut dx = FeatureMap::zeros(x.channels, x.height, x.width);
        let mut offset = 0;
        if let (Some(mid), Some(out)) = (&cache.conv_mid, &cache.conv_out) {
            let mut d_out = slice_channels(dy, 0..self.width)?;
            relu_backward_in_place(&out.data, &mut d_out.data);
            let mut d_mid = self.conv1.backward(params, grads, mid, &d_out);
            relu_backward_in_place(&mid.data, &mut d_mid.data);
            let d = self.conv3.backward(params, grads, x, &d_mid);
            add_into(&mut dx, &d);
            offset = self.width;
        }
        if let Some(pc) = &cache.pooled {
            let d_up = slice_channels(dy, offset..offset + self.width)?;
            let mut d_proj = upsample_nearest_backward(&d_up, 2);
            relu_backward_in_place(&pc.proj.data, &mut d_proj.data);
            let d_cat = self.pool_proj.backward(params, grads, &pc.cat, &d_proj);
            let c = x.channels;
            let d_avg = slice_channels(&d_cat, 0..c)?;
            let d_max = slice_channels(&d_cat, c..2 * c)?;
            add_into(&mut dx, &window_pool_backward(dims, 2, PoolMode::Avg, &[], &d_avg));
            add_into(
                &mut dx,
                &window_pool_backward(dims, 2, PoolMode::Max, &pc.max_argmax, &d_max),
            );
        }
        Ok(dx)
    }
}

pub(crate) fn add_into(acc: &mut FeatureMap, other: &FeatureMap) {
    acc.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
}

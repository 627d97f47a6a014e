//! The attribute interaction network.
//!
//! Forward order: 1x1 projection of every branch map to a common width, channel
//! concatenation, channel attention, per-branch slicing and average pooling, one
//! gate per attribute over the joint vector `o`, then bilinear fusion of the gated
//! attribute features (`y1`) with the generic vector (`y2`).
//!
//! With `interaction = false` the attention/gate/bilinear stack is replaced by
//! plain concatenation of the pooled projections and a single linear head.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, AttentionRecord, ChannelAttention};
use super::bilinear::Bilinear;
use super::gate::{Gate, GateCache};
use crate::diffmath::activation::{sigmoid_scalar, softmax, softmax_backward};
use crate::diffmath::linear::Linear;
use crate::diffmath::spatial::{concat_channels, slice_channels, spatial_pool, PoolMode, Projection};
use crate::error::{Error, Result};
use crate::tensor::{BlockParams, FeatureMap, GradStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Composition,
    Color,
    Exposure,
    Theme,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Composition,
        Attribute::Color,
        Attribute::Exposure,
        Attribute::Theme,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Composition => "composition",
            Attribute::Color => "color",
            Attribute::Exposure => "exposure",
            Attribute::Theme => "theme",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid("attribute", format!("unknown attribute `{s}`")))
    }
}

pub const GENERIC: &str = "generic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    #[default]
    Score,
    Distribution,
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Self::Score),
            "distribution" => Ok(Self::Distribution),
            other => Err(Error::invalid("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// One feature map per configured attribute plus the generic aesthetic map.
#[derive(Debug, Clone)]
pub struct AttributeSet {
    pub attributes: Vec<(Attribute, FeatureMap)>,
    pub generic: FeatureMap,
}

impl AttributeSet {
    pub fn get(&self, attr: Attribute) -> Result<&FeatureMap> {
        self.attributes
            .iter()
            .find(|(a, _)| *a == attr)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::MissingAttribute(attr.name().to_string()))
    }
}

/// Channel concatenation of the projected branch maps and where each one sits.
#[derive(Debug, Clone)]
pub struct FusionInput {
    pub c: FeatureMap,
    pub offsets: Vec<(String, Range<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mode: OutputMode,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<f64>>,
}

/// Map raw head outputs to a prediction.
///
/// Score mode squashes to `1 + 9·sigmoid(raw)`. Distribution mode applies softmax
/// and scalarizes as `Σ k·p_k` over buckets `1..=B`.
pub fn prediction_from_logits(logits: &[f64], mode: OutputMode) -> Prediction {
    match mode {
        OutputMode::Score => Prediction {
            mode,
            score: 1.0 + 9.0 * sigmoid_scalar(logits[0]),
            distribution: None,
        },
        OutputMode::Distribution => {
            let p = softmax(logits);
            Prediction {
                mode,
                score: distribution_mean(&p),
                distribution: Some(p),
            }
        }
    }
}

/// `Σ k·p_k` with buckets numbered from 1.
pub fn distribution_mean(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum()
}

/// Chain a loss gradient on the prediction back to the head logits.
pub fn logits_backward(
    logits: &[f64],
    pred: &Prediction,
    d_score: f64,
    d_dist: Option<&[f64]>,
) -> Vec<f64> {
    match pred.mode {
        OutputMode::Score => {
            let s = sigmoid_scalar(logits[0]);
            vec![d_score * 9.0 * s * (1.0 - s)]
        }
        OutputMode::Distribution => {
            let p = pred.distribution.as_deref().unwrap_or(&[]);
            let dp: Vec<f64> = (0..p.len())
                .map(|k| d_dist.map_or(0.0, |d| d[k]) + d_score * (k + 1) as f64)
                .collect();
            softmax_backward(p, &dp)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub attributes: Vec<Attribute>,
    /// Common projected width `C*`.
    pub channels: usize,
    /// MLP reduction ratio `r` in `max(ceil(C/r), 4)`.
    pub reduction: usize,
    pub mode: OutputMode,
    pub buckets: usize,
    pub interaction: bool,
    /// Whether the joint vector `o` seen by the gates includes the generic vector.
    pub gate_includes_generic: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            attributes: Attribute::ALL.to_vec(),
            channels: 16,
            reduction: 16,
            mode: OutputMode::Score,
            buckets: 10,
            interaction: true,
            gate_includes_generic: true,
        }
    }
}

impl FusionConfig {
    pub fn head_units(&self) -> usize {
        match self.mode {
            OutputMode::Score => 1,
            OutputMode::Distribution => self.buckets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("fusion", "channels must be positive"));
        }
        if self.mode == OutputMode::Distribution && self.buckets < 2 {
            return Err(Error::invalid("fusion", "distribution mode needs >= 2 buckets"));
        }
        if self.interaction && self.attributes.is_empty() {
            return Err(Error::invalid(
                "fusion",
                "the interaction network needs at least one attribute branch",
            ));
        }
        let mut seen = self.attributes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.attributes.len() {
            return Err(Error::invalid("fusion", "duplicate attribute"));
        }
        Ok(())
    }

    /// Number of branches including the generic one.
    pub fn branches(&self) -> usize {
        self.attributes.len() + 1
    }

    pub fn joint_dim(&self) -> usize {
        let n = if self.gate_includes_generic {
            self.branches()
        } else {
            self.attributes.len()
        };
        n * self.channels
    }
}

#[derive(Debug, Clone)]
enum Head {
    Interacting {
        attention: ChannelAttention,
        gates: Vec<Gate>,
        bilinear: Bilinear,
    },
    Plain(Linear),
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    pub cfg: FusionConfig,
    projections: Vec<Projection>,
    head: Head,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    inputs: Vec<FeatureMap>,
    plane: usize,
    dims: (usize, usize),
    interacting: Option<InteractCache>,
    pooled: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone)]
struct InteractCache {
    input: FusionInput,
    record: AttentionRecord,
    attention: AttentionCache,
    o: Vec<f64>,
    gates: Vec<GateCache>,
    y1: Vec<f64>,
}

impl FusionCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn attention(&self) -> Option<&AttentionRecord> {
        self.interacting.as_ref().map(|c| &c.record)
    }

    pub fn fusion_input(&self) -> Option<&FusionInput> {
        self.interacting.as_ref().map(|c| &c.input)
    }

    /// `y1`, the concatenated gated attribute features.
    pub fn gated(&self) -> Option<&[f64]> {
        self.interacting.as_ref().map(|c| c.y1.as_slice())
    }
}

fn ensure_finite(block: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            block: block.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

impl FusionNet {
    /// `in_channels` lists the channel count of each attribute map (in
    /// `cfg.attributes` order) followed by the generic map.
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        cfg: FusionConfig,
        in_channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if in_channels.len() != cfg.branches() {
            return Err(Error::shape(
                "fusion",
                format!(
                    "{} input widths for {} branches",
                    in_channels.len(),
                    cfg.branches()
                ),
            ));
        }
        let c = cfg.channels;
        let mut projections = Vec::with_capacity(cfg.branches());
        for (i, &cin) in in_channels.iter().enumerate() {
            let branch = cfg.attributes.get(i).map_or(GENERIC, |a| a.name());
            projections.push(Projection::new(params, &format!("{name}.project.{branch}"), cin, c, rng)?);
        }
        let units = cfg.head_units();
        let head = if cfg.interaction {
            let attention =
                ChannelAttention::new(params, &format!("{name}.attention"), cfg.branches() * c, cfg.reduction, rng)?;
            let joint = cfg.joint_dim();
            let gates = cfg
                .attributes
                .iter()
                .map(|a| Gate::new(params, &format!("{name}.gate.{a}"), c, joint, cfg.reduction, rng))
                .collect::<Result<Vec<_>>>()?;
            let bilinear = Bilinear::new(
                params,
                &format!("{name}.bilinear"),
                cfg.attributes.len() * joint,
                c,
                units,
                rng,
            )?;
            Head::Interacting {
                attention,
                gates,
                bilinear,
            }
        } else {
            Head::Plain(Linear::new(params, &format!("{name}.head"), cfg.branches() * c, units, rng)?)
        };
        Ok(Self {
            cfg,
            projections,
            head,
        })
    }

    pub fn forward(&self, params: &BlockParams, set: &AttributeSet) -> Result<(Prediction, FusionCache)> {
        let mut inputs: Vec<FeatureMap> = self
            .cfg
            .attributes
            .iter()
            .map(|&a| set.get(a).cloned())
            .collect::<Result<_>>()?;
        inputs.push(set.generic.clone());
        let (h, w) = (inputs[0].height, inputs[0].width);

        let mut projected = Vec::with_capacity(inputs.len());
        for (proj, map) in self.projections.iter().zip(&inputs) {
            let out = proj.forward(params, map)?;
            ensure_finite("projection", &out.data)?;
            projected.push(out);
        }

        let n = self.cfg.attributes.len();
        let c = self.cfg.channels;
        let (logits, interacting, pooled) = match &self.head {
            Head::Plain(linear) => {
                let pooled: Vec<Vec<f64>> = projected
                    .iter()
                    .map(|m| spatial_pool(m, PoolMode::Avg).map(|p| p.0))
                    .collect::<Result<_>>()?;
                let joint = pooled.concat();
                (linear.forward(params, &joint)?, None, pooled)
            }
            Head::Interacting {
                attention,
                gates,
                bilinear,
            } => {
                let refs: Vec<&FeatureMap> = projected.iter().collect();
                let (cat, ranges) = concat_channels(&refs)?;
                let offsets = ranges
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let name = self.cfg.attributes.get(i).map_or(GENERIC, |a| a.name());
                        (name.to_string(), r)
                    })
                    .collect();
                let input = FusionInput { c: cat, offsets };
                let (record, att_cache) = attention.forward(params, &input.c)?;
                ensure_finite("channel_attention", &record.weights)?;
                let pooled: Vec<Vec<f64>> = input
                    .offsets
                    .iter()
                    .map(|(_, r)| {
                        slice_channels(&record.h, r.clone())
                            .and_then(|m| spatial_pool(&m, PoolMode::Avg))
                            .map(|p| p.0)
                    })
                    .collect::<Result<_>>()?;
                let o: Vec<f64> = if self.cfg.gate_includes_generic {
                    pooled.concat()
                } else {
                    pooled[..n].concat()
                };
                let mut y1 = Vec::with_capacity(n * o.len());
                let mut gate_caches = Vec::with_capacity(n);
                for (gate, x) in gates.iter().zip(&pooled) {
                    let (z, gc) = gate.forward(params, x, &o)?;
                    y1.extend_from_slice(&z);
                    gate_caches.push(gc);
                }
                ensure_finite("gate", &y1)?;
                let logits = bilinear.forward(params, &y1, &pooled[n])?;
                (
                    logits,
                    Some(InteractCache {
                        input,
                        record,
                        attention: att_cache,
                        o,
                        gates: gate_caches,
                        y1,
                    }),
                    pooled,
                )
            }
        };
        ensure_finite("head", &logits)?;
        debug_assert!(pooled.iter().all(|p| p.len() == c));
        let pred = prediction_from_logits(&logits, self.cfg.mode);
        Ok((
            pred,
            FusionCache {
                inputs,
                plane: h * w,
                dims: (h, w),
                interacting,
                pooled,
                logits,
            },
        ))
    }

    /// Distance of a forward pass from the nearest ReLU or max-pool kink.
    pub(crate) fn kink_margin(&self, params: &BlockParams, cache: &FusionCache) -> Result<f64> {
        match (&self.head, &cache.interacting) {
            (
                Head::Interacting {
                    attention, gates, ..
                },
                Some(ic),
            ) => {
                let mut m = attention.kink_margin(params, &ic.input.c)?;
                for (gate, x) in gates.iter().zip(&cache.pooled) {
                    m = m.min(gate.kink_margin(params, x)?);
                }
                Ok(m)
            }
            _ => Ok(f64::INFINITY),
        }
    }

    /// Backpropagate from head logits; returns one gradient per input branch map
    /// (attributes in config order, then generic).
    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        cache: &FusionCache,
        d_logits: &[f64],
    ) -> Result<Vec<FeatureMap>> {
        let n = self.cfg.attributes.len();
        let c = self.cfg.channels;
        let (h, w) = cache.dims;
        let plane = cache.plane as f64;
        let d_projected: Vec<FeatureMap> = match (&self.head, &cache.interacting) {
            (Head::Plain(linear), _) => {
                let joint = cache.pooled.concat();
                let d_joint = linear.backward(params, grads, &joint, d_logits);
                d_joint
                    .chunks(c)
                    .map(|d| FeatureMap::from_fn(c, h, w, |ch, _, _| d[ch] / plane))
                    .collect()
            }
            (
                Head::Interacting {
                    attention,
                    gates,
                    bilinear,
                },
                Some(ic),
            ) => {
                let (dy1, dy2) = bilinear.backward(params, grads, &ic.y1, &cache.pooled[n], d_logits);
                let joint = ic.o.len();
                let mut d_pooled: Vec<Vec<f64>> = vec![vec![0.0; c]; n + 1];
                d_pooled[n] = dy2;
                let mut d_o = vec![0.0; joint];
                for (i, gate) in gates.iter().enumerate() {
                    let (dx, dor) = gate.backward(
                        params,
                        grads,
                        &cache.pooled[i],
                        &ic.o,
                        &ic.gates[i],
                        &dy1[i * joint..(i + 1) * joint],
                    );
                    d_pooled[i].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                    d_o.iter_mut().zip(&dor).for_each(|(a, b)| *a += b);
                }
                for (k, chunk) in d_o.chunks(c).enumerate() {
                    d_pooled[k].iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                let total = (n + 1) * c;
                let dh = FeatureMap::from_fn(total, h, w, |ch, _, _| d_pooled[ch / c][ch % c] / plane);
                let dc = attention.backward(params, grads, &ic.input.c, &ic.record, &ic.attention, &dh);
                ic.input
                    .offsets
                    .iter()
                    .map(|(_, r)| slice_channels(&dc, r.clone()))
                    .collect::<Result<_>>()?
            }
            (Head::Interacting { .. }, None) => {
                return Err(Error::invalid("fusion", "cache lacks interaction state"))
            }
        };
        Ok(self
            .projections
            .iter()
            .zip(&cache.inputs)
            .zip(&d_projected)
            .map(|((proj, x), d)| proj.backward(params, grads, x, d))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut impl Rng, attrs: &[Attribute], cin: usize, s: usize) -> AttributeSet {
        let mut m = || FeatureMap::from_fn(cin, s, s, |_, _, _| rng.random_range(-1.0..1.0));
        AttributeSet {
            attributes: attrs.iter().map(|&a| (a, m())).collect(),
            generic: m(),
        }
    }

    fn build(cfg: FusionConfig, cin: usize, seed: u64) -> (FusionNet, BlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BlockParams::new();
        let widths = vec![cin; cfg.branches()];
        let net = FusionNet::new(&mut p, "fusion", cfg, &widths, &mut rng).unwrap();
        (net, p)
    }

    #[test]
    fn zero_params_score_mode_is_midpoint() {
        let cfg = FusionConfig {
            channels: 4,
            ..FusionConfig::default()
        };
        let (net, mut p) = build(cfg, 3, 1);
        for (_, t) in p.iter_mut() {
            t.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, &Attribute::ALL, 3, 4);
        let (pred, _) = net.forward(&p, &set).unwrap();
        assert_eq!(pred.score, 5.5);
        assert!(pred.distribution.is_none());
    }

    #[test]
    fn distribution_mode_normalized() {
        let cfg = FusionConfig {
            channels: 4,
            mode: OutputMode::Distribution,
            ..FusionConfig::default()
        };
        let (net, p) = build(cfg, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let set = random_set(&mut rng, &Attribute::ALL, 5, 4);
            let (pred, _) = net.forward(&p, &set).unwrap();
            let d = pred.distribution.unwrap();
            assert_eq!(d.len(), 10);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|&v| v >= 0.0));
            assert!((pred.score - distribution_mean(&d)).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_attribute_is_an_error() {
        let cfg = FusionConfig {
            channels: 4,
            ..FusionConfig::default()
        };
        let (net, p) = build(cfg, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = random_set(&mut rng, &[Attribute::Color, Attribute::Theme], 3, 4);
        assert!(matches!(net.forward(&p, &set), Err(Error::MissingAttribute(_))));
    }

    #[test]
    fn attention_weights_recorded_in_unit_interval() {
        let cfg = FusionConfig {
            channels: 4,
            ..FusionConfig::default()
        };
        let (net, p) = build(cfg, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = random_set(&mut rng, &Attribute::ALL, 3, 4);
        let (_, cache) = net.forward(&p, &set).unwrap();
        let rec = cache.attention().unwrap();
        assert_eq!(rec.weights.len(), 20);
        assert!(rec.weights.iter().all(|&w| w > 0.0 && w < 1.0));
        let input = cache.fusion_input().unwrap();
        assert_eq!(input.offsets.last().unwrap().0, GENERIC);
        assert_eq!(input.offsets.last().unwrap().1, 16..20);
    }

    #[test]
    fn plain_head_backbone_only() {
        let cfg = FusionConfig {
            attributes: vec![],
            channels: 4,
            interaction: false,
            ..FusionConfig::default()
        };
        let (net, p) = build(cfg, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = random_set(&mut rng, &[], 3, 4);
        let (pred, cache) = net.forward(&p, &set).unwrap();
        assert!(pred.score > 1.0 && pred.score < 10.0);
        assert!(cache.attention().is_none());
    }

    #[test]
    fn interaction_requires_an_attribute() {
        let cfg = FusionConfig {
            attributes: vec![],
            ..FusionConfig::default()
        };
        let mut p = BlockParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(FusionNet::new(&mut p, "f", cfg, &[4], &mut rng).is_err());
    }
}

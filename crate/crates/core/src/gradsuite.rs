//! Finite-difference verification of every differentiable block over many
//! random draws. Draws that land within [`KINK_MARGIN`] of a ReLU, max-pool,
//! absolute-value or hinge kink are redrawn, since central differences are
//! not meaningful across a kink.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffmath::gradcheck::{finite_diff_check_report, Block, DEFAULT_EPS};
use crate::diffmath::linear::{hidden_width, Linear, Mlp};
use crate::diffmath::spatial::{
    max_pool_gap, spatial_pool, spatial_pool_backward, upsample_nearest, upsample_nearest_backward,
    window_pool, window_pool_backward, Conv2d, PoolMode, Projection,
};
use crate::error::{Error, Result};
use crate::fusion::{
    logits_backward, AapBlock, AapVariant, Attribute, AttributeSet, Bilinear, ChannelAttention,
    FusionConfig, FusionNet, Gate, Model, ModelConfig, OutputMode,
};
use crate::losses::{emd_unchecked, mse_loss, relative_relation_loss, SortedBatch};
use crate::tensor::{BlockParams, FeatureMap, GradStore, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 50;
const MAX_REDRAWS: usize = 200;

type Forward = dyn Fn(&BlockParams, &[Tensor]) -> Result<Vec<Tensor>> + Send + Sync;
type Backward =
    dyn Fn(&BlockParams, &mut GradStore, &[Tensor], &[Tensor]) -> Result<Vec<Tensor>> + Send + Sync;

struct FnBlock {
    name: &'static str,
    constant: Vec<usize>,
    fwd: Box<Forward>,
    bwd: Box<Backward>,
}

impl Block for FnBlock {
    fn name(&self) -> &str {
        self.name
    }

    fn forward(&self, params: &BlockParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        (self.fwd)(params, inputs)
    }

    fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        inputs: &[Tensor],
        upstream: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        (self.bwd)(params, grads, inputs, upstream)
    }

    fn is_constant_input(&self, index: usize) -> bool {
        self.constant.contains(&index)
    }
}

struct Case {
    block: FnBlock,
    params: BlockParams,
    inputs: Vec<Tensor>,
    margin: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

fn randomize(params: &mut BlockParams, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
}

fn map(t: &Tensor) -> Result<FeatureMap> {
    FeatureMap::from_tensor(t)
}

fn vec_out(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v)
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (i, o) = (rng.random_range(2..7), rng.random_range(1..6));
    let mut params = BlockParams::new();
    let lin = Arc::new(Linear::new(&mut params, "linear", i, o, rng)?);
    randomize(&mut params, rng);
    let l2 = lin.clone();
    Ok(Case {
        block: FnBlock {
            name: "linear",
            constant: vec![],
            fwd: Box::new(move |p, x| Ok(vec![vec_out(lin.forward(p, &x[0].data)?)])),
            bwd: Box::new(move |p, g, x, up| Ok(vec![vec_out(l2.backward(p, g, &x[0].data, &up[0].data))])),
        },
        params,
        inputs: vec![uniform(rng, &[i], -1.0, 1.0)],
        margin: f64::INFINITY,
    })
}

fn mlp_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (i, o) = (rng.random_range(3..9), rng.random_range(2..7));
    let mut params = BlockParams::new();
    let mlp = Arc::new(Mlp::new(&mut params, "mlp", i, hidden_width(i, 2), o, rng)?);
    randomize(&mut params, rng);
    let x = uniform(rng, &[i], -1.0, 1.0);
    let margin = mlp.kink_margin(&params, &x.data)?;
    let m2 = mlp.clone();
    Ok(Case {
        block: FnBlock {
            name: "mlp",
            constant: vec![],
            fwd: Box::new(move |p, x| Ok(vec![vec_out(mlp.forward(p, &x[0].data)?.0)])),
            bwd: Box::new(move |p, g, x, up| {
                let (_, cache) = m2.forward(p, &x[0].data)?;
                Ok(vec![vec_out(m2.backward(p, g, &x[0].data, &cache, &up[0].data))])
            }),
        },
        params,
        inputs: vec![x],
        margin,
    })
}

fn conv_block(name: &'static str, conv: Conv2d) -> FnBlock {
    let conv = Arc::new(conv);
    let c2 = conv.clone();
    FnBlock {
        name,
        constant: vec![],
        fwd: Box::new(move |p, x| Ok(vec![conv.forward(p, &map(&x[0])?)?.to_tensor()])),
        bwd: Box::new(move |p, g, x, up| {
            Ok(vec![c2.backward(p, g, &map(&x[0])?, &map(&up[0])?).to_tensor()])
        }),
    }
}

fn conv3x3_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (ci, co, side) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(3..7));
    let stride = rng.random_range(1..3);
    let mut params = BlockParams::new();
    let conv = Conv2d::new(&mut params, "conv", ci, co, 3, stride, 1, rng)?;
    randomize(&mut params, rng);
    Ok(Case {
        block: conv_block("conv3x3", conv),
        params,
        inputs: vec![uniform(rng, &[ci, side, side], -1.0, 1.0)],
        margin: f64::INFINITY,
    })
}

fn projection_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (ci, co, side) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
    let mut params = BlockParams::new();
    let proj = Projection::new(&mut params, "proj", ci, co, rng)?;
    randomize(&mut params, rng);
    Ok(Case {
        block: conv_block("projection_1x1", proj.0),
        params,
        inputs: vec![uniform(rng, &[ci, side, side], -1.0, 1.0)],
        margin: f64::INFINITY,
    })
}

fn window_pool_case(mode: PoolMode) -> impl Fn(&mut ChaCha8Rng) -> Result<Case> {
    move |rng| {
        let (c, side) = (rng.random_range(1..4), 2 * rng.random_range(1..4));
        let x = uniform(rng, &[c, side, side], -1.0, 1.0);
        let margin = match mode {
            PoolMode::Max => max_pool_gap(&map(&x)?, Some(2)),
            PoolMode::Avg => f64::INFINITY,
        };
        Ok(Case {
            block: FnBlock {
                name: match mode {
                    PoolMode::Avg => "window_pool_avg",
                    PoolMode::Max => "window_pool_max",
                },
                constant: vec![],
                fwd: Box::new(move |_, x| Ok(vec![window_pool(&map(&x[0])?, 2, mode)?.0.to_tensor()])),
                bwd: Box::new(move |_, _, x, up| {
                    let m = map(&x[0])?;
                    let (_, argmax) = window_pool(&m, 2, mode)?;
                    let dims = (m.channels, m.height, m.width);
                    Ok(vec![window_pool_backward(dims, 2, mode, &argmax, &map(&up[0])?).to_tensor()])
                }),
            },
            params: BlockParams::new(),
            inputs: vec![x],
            margin,
        })
    }
}

fn global_pool_case(mode: PoolMode) -> impl Fn(&mut ChaCha8Rng) -> Result<Case> {
    move |rng| {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4));
        let x = uniform(rng, &[c, h, w], -1.0, 1.0);
        let margin = match mode {
            PoolMode::Max => max_pool_gap(&map(&x)?, None),
            PoolMode::Avg => f64::INFINITY,
        };
        Ok(Case {
            block: FnBlock {
                name: match mode {
                    PoolMode::Avg => "global_pool_avg",
                    PoolMode::Max => "global_pool_max",
                },
                constant: vec![],
                fwd: Box::new(move |_, x| Ok(vec![vec_out(spatial_pool(&map(&x[0])?, mode)?.0)])),
                bwd: Box::new(move |_, _, x, up| {
                    let m = map(&x[0])?;
                    let (_, argmax) = spatial_pool(&m, mode)?;
                    let dims = (m.channels, m.height, m.width);
                    Ok(vec![spatial_pool_backward(dims, mode, &argmax, &up[0].data).to_tensor()])
                }),
            },
            params: BlockParams::new(),
            inputs: vec![x],
            margin,
        })
    }
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (c, side) = (rng.random_range(1..4), rng.random_range(1..4));
    Ok(Case {
        block: FnBlock {
            name: "upsample_nearest",
            constant: vec![],
            fwd: Box::new(|_, x| Ok(vec![upsample_nearest(&map(&x[0])?, 2).to_tensor()])),
            bwd: Box::new(|_, _, _, up| Ok(vec![upsample_nearest_backward(&map(&up[0])?, 2).to_tensor()])),
        },
        params: BlockParams::new(),
        inputs: vec![uniform(rng, &[c, side, side], -1.0, 1.0)],
        margin: f64::INFINITY,
    })
}

fn aap_case(variant: AapVariant) -> impl Fn(&mut ChaCha8Rng) -> Result<Case> {
    move |rng| {
        let mut params = BlockParams::new();
        let block = Arc::new(AapBlock::new(&mut params, "aap", 8, 3, variant, rng)?);
        randomize(&mut params, rng);
        let x = uniform(rng, &[8, 4, 4], -1.0, 1.0);
        let margin = block.kink_margin(&params, &map(&x)?)?;
        let b2 = block.clone();
        Ok(Case {
            block: FnBlock {
                name: match variant {
                    AapVariant::Full => "aap_full",
                    AapVariant::NoCnn => "aap_no_cnn",
                    AapVariant::NoPool => "aap_no_pool",
                },
                constant: vec![],
                fwd: Box::new(move |p, x| Ok(vec![block.forward(p, &map(&x[0])?)?.0.to_tensor()])),
                bwd: Box::new(move |p, g, x, up| {
                    let m = map(&x[0])?;
                    let (_, cache) = b2.forward(p, &m)?;
                    Ok(vec![b2.backward(p, g, &m, &cache, &map(&up[0])?)?.to_tensor()])
                }),
            },
            params,
            inputs: vec![x],
            margin,
        })
    }
}

fn attention_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (c, side) = (rng.random_range(2..9), rng.random_range(1..4));
    let mut params = BlockParams::new();
    let att = Arc::new(ChannelAttention::new(&mut params, "attention", c, 2, rng)?);
    randomize(&mut params, rng);
    let x = uniform(rng, &[c, side, side], -1.0, 1.0);
    let margin = att.kink_margin(&params, &map(&x)?)?;
    let a2 = att.clone();
    Ok(Case {
        block: FnBlock {
            name: "channel_attention",
            constant: vec![],
            fwd: Box::new(move |p, x| Ok(vec![att.forward(p, &map(&x[0])?)?.0.h.to_tensor()])),
            bwd: Box::new(move |p, g, x, up| {
                let m = map(&x[0])?;
                let (rec, cache) = a2.forward(p, &m)?;
                Ok(vec![a2.backward(p, g, &m, &rec, &cache, &map(&up[0])?).to_tensor()])
            }),
        },
        params,
        inputs: vec![x],
        margin,
    })
}

fn gate_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (d, joint) = (rng.random_range(2..7), rng.random_range(2..10));
    let mut params = BlockParams::new();
    let gate = Arc::new(Gate::new(&mut params, "gate", d, joint, 2, rng)?);
    randomize(&mut params, rng);
    let x = uniform(rng, &[d], -1.0, 1.0);
    let margin = gate.kink_margin(&params, &x.data)?;
    let g2 = gate.clone();
    Ok(Case {
        block: FnBlock {
            name: "gate_attribute",
            constant: vec![],
            fwd: Box::new(move |p, x| Ok(vec![vec_out(gate.forward(p, &x[0].data, &x[1].data)?.0)])),
            bwd: Box::new(move |p, g, x, up| {
                let (_, cache) = g2.forward(p, &x[0].data, &x[1].data)?;
                let (dx, d_o) = g2.backward(p, g, &x[0].data, &x[1].data, &cache, &up[0].data);
                Ok(vec![vec_out(dx), vec_out(d_o)])
            }),
        },
        params,
        inputs: vec![x, uniform(rng, &[joint], -1.0, 1.0)],
        margin,
    })
}

fn bilinear_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (d1, d2) = (rng.random_range(1..7), rng.random_range(1..5));
    let units = if rng.random_bool(0.5) { 1 } else { rng.random_range(2..6) };
    let mut params = BlockParams::new();
    let bil = Arc::new(Bilinear::new(&mut params, "bilinear", d1, d2, units, rng)?);
    randomize(&mut params, rng);
    let b2 = bil.clone();
    Ok(Case {
        block: FnBlock {
            name: "bilinear_fuse",
            constant: vec![],
            fwd: Box::new(move |p, x| Ok(vec![vec_out(bil.forward(p, &x[0].data, &x[1].data)?)])),
            bwd: Box::new(move |p, g, x, up| {
                let (a, b) = b2.backward(p, g, &x[0].data, &x[1].data, &up[0].data);
                Ok(vec![vec_out(a), vec_out(b)])
            }),
        },
        params,
        inputs: vec![uniform(rng, &[d1], -1.0, 1.0), uniform(rng, &[d2], -1.0, 1.0)],
        margin: f64::INFINITY,
    })
}

const FUSION_ATTRS: [Attribute; 2] = [Attribute::Composition, Attribute::Color];

fn attribute_set(inputs: &[Tensor]) -> Result<AttributeSet> {
    Ok(AttributeSet {
        attributes: FUSION_ATTRS
            .iter()
            .zip(inputs)
            .map(|(&a, t)| Ok((a, map(t)?)))
            .collect::<Result<_>>()?,
        generic: map(&inputs[FUSION_ATTRS.len()])?,
    })
}

/// Outputs: the score, plus the distribution in distribution mode.
fn prediction_tensors(pred: &crate::fusion::Prediction) -> Vec<Tensor> {
    let mut out = vec![vec_out(vec![pred.score])];
    if let Some(d) = &pred.distribution {
        out.push(vec_out(d.clone()));
    }
    out
}

fn fusion_case(
    name: &'static str,
    mode: OutputMode,
    interaction: bool,
) -> impl Fn(&mut ChaCha8Rng) -> Result<Case> {
    move |rng| {
        let cfg = FusionConfig {
            attributes: FUSION_ATTRS.to_vec(),
            channels: 4,
            reduction: 2,
            mode,
            buckets: 5,
            interaction,
            gate_includes_generic: rng.random_bool(0.5),
        };
        let mut params = BlockParams::new();
        let net = Arc::new(FusionNet::new(&mut params, "fusion", cfg, &[3, 3, 3], rng)?);
        randomize(&mut params, rng);
        let inputs: Vec<Tensor> = (0..3).map(|_| uniform(rng, &[3, 2, 2], -1.0, 1.0)).collect();
        let (_, cache) = net.forward(&params, &attribute_set(&inputs)?)?;
        let margin = net.kink_margin(&params, &cache)?;
        let n2 = net.clone();
        Ok(Case {
            block: FnBlock {
                name,
                constant: vec![],
                fwd: Box::new(move |p, x| Ok(prediction_tensors(&net.forward(p, &attribute_set(x)?)?.0))),
                bwd: Box::new(move |p, g, x, up| {
                    let (pred, cache) = n2.forward(p, &attribute_set(x)?)?;
                    let d_dist = up.get(1).map(|t| t.data.as_slice());
                    let d_logits = logits_backward(cache.logits(), &pred, up[0].data[0], d_dist);
                    Ok(n2
                        .backward(p, g, &cache, &d_logits)?
                        .iter()
                        .map(FeatureMap::to_tensor)
                        .collect())
                }),
            },
            params,
            inputs,
            margin,
        })
    }
}

fn model_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = ModelConfig {
        image_size: 8,
        grid: 2,
        stem_channels: [2, 3],
        aap_width: 2,
        aap_variant: AapVariant::Full,
        positional: true,
        fusion: FusionConfig {
            attributes: vec![Attribute::Color, Attribute::Exposure],
            channels: 2,
            reduction: 2,
            ..FusionConfig::default()
        },
    };
    let mut model = Model::new(cfg, rng.random())?;
    randomize(&mut model.params, rng);
    let image = uniform(rng, &[3, 8, 8], 0.0, 1.0);
    let (_, cache) = model.forward(&map(&image)?)?;
    let margin = model.kink_margin(&cache)?;
    let params = model.params.clone();
    let model = Arc::new(model);
    let m2 = model.clone();
    let with = |m: &Model, p: &BlockParams| {
        let mut m = m.clone();
        m.params = p.clone();
        m
    };
    Ok(Case {
        block: FnBlock {
            name: "model_miniature",
            // the model does not backpropagate into the image
            constant: vec![0],
            fwd: Box::new(move |p, x| Ok(prediction_tensors(&with(&model, p).predict(&map(&x[0])?)?))),
            bwd: Box::new(move |p, g, x, up| {
                let m = with(&m2, p);
                let (_, cache) = m.forward(&map(&x[0])?)?;
                m.backward(g, &cache, up[0].data[0], None, true)?;
                Ok(vec![Tensor::zeros(&x[0].shape)])
            }),
        },
        params,
        inputs: vec![image],
        margin,
    })
}

fn mse_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..9);
    Ok(Case {
        block: FnBlock {
            name: "mse",
            constant: vec![1],
            fwd: Box::new(|_, x| Ok(vec![vec_out(vec![mse_loss(&x[0].data, &x[1].data)?.0])])),
            bwd: Box::new(|_, _, x, up| {
                let (_, d) = mse_loss(&x[0].data, &x[1].data)?;
                Ok(vec![vec_out(d.iter().map(|v| v * up[0].data[0]).collect()), Tensor::zeros(&x[1].shape)])
            }),
        },
        params: BlockParams::new(),
        inputs: vec![uniform(rng, &[n], 1.0, 10.0), uniform(rng, &[n], 1.0, 10.0)],
        margin: f64::INFINITY,
    })
}

fn random_distribution(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    let raw: Vec<f64> = (0..b).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    vec_out(raw.into_iter().map(|v| v / s).collect())
}

fn emd_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let b = rng.random_range(3..11);
    let p = random_distribution(rng, b);
    let g = random_distribution(rng, b);
    Ok(Case {
        block: FnBlock {
            name: "emd",
            constant: vec![1],
            fwd: Box::new(|_, x| Ok(vec![vec_out(vec![emd_unchecked(&x[0].data, &x[1].data, 2.0).0])])),
            bwd: Box::new(|_, _, x, up| {
                let (_, d) = emd_unchecked(&x[0].data, &x[1].data, 2.0);
                Ok(vec![vec_out(d.iter().map(|v| v * up[0].data[0]).collect()), Tensor::zeros(&x[1].shape)])
            }),
        },
        params: BlockParams::new(),
        inputs: vec![p, g],
        margin: f64::INFINITY,
    })
}

/// Distance from the nearest `|·|` or hinge kink of the relative loss.
fn relative_margin(p: &[f64], g: &[f64]) -> f64 {
    let b = p.len();
    let mut m = f64::INFINITY;
    for i in 0..b {
        for j in i + 1..b {
            m = m.min((p[i] - p[j]).abs());
        }
    }
    for a in 2..b - 2 {
        let pairs = (1..a).map(|j| (j, j - 1)).chain((a + 1..b - 1).map(|j| (j, j + 1)));
        for (j, k) in pairs {
            let arg = (p[a] - p[j]).abs() - (p[a] - p[k]).abs() + (g[j] - g[k]).abs();
            m = m.min(arg.abs());
        }
    }
    m
}

fn relative_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let b = rng.random_range(5..13);
    let mut g = uniform(rng, &[b], 1.0, 10.0);
    g.data.sort_by(|x, y| y.total_cmp(x));
    let p = uniform(rng, &[b], 1.0, 10.0);
    let margin = relative_margin(&p.data, &g.data);
    let eval = |x: &[Tensor]| relative_relation_loss(&SortedBatch::new(x[1].data.clone(), x[0].data.clone())?);
    Ok(Case {
        block: FnBlock {
            name: "relative_relation_loss",
            constant: vec![1],
            fwd: Box::new(move |_, x| Ok(vec![vec_out(vec![eval(x)?.0])])),
            bwd: Box::new(move |_, _, x, up| {
                let (_, d) = eval(x)?;
                Ok(vec![vec_out(d.iter().map(|v| v * up[0].data[0]).collect()), Tensor::zeros(&x[1].shape)])
            }),
        },
        params: BlockParams::new(),
        inputs: vec![p, g],
        margin,
    })
}

type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Case> + Send + Sync>;

fn builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("linear", Box::new(linear_case)),
        ("mlp", Box::new(mlp_case)),
        ("conv3x3", Box::new(conv3x3_case)),
        ("projection_1x1", Box::new(projection_case)),
        ("window_pool_avg", Box::new(window_pool_case(PoolMode::Avg))),
        ("window_pool_max", Box::new(window_pool_case(PoolMode::Max))),
        ("global_pool_avg", Box::new(global_pool_case(PoolMode::Avg))),
        ("global_pool_max", Box::new(global_pool_case(PoolMode::Max))),
        ("upsample_nearest", Box::new(upsample_case)),
        ("aap_full", Box::new(aap_case(AapVariant::Full))),
        ("aap_no_cnn", Box::new(aap_case(AapVariant::NoCnn))),
        ("aap_no_pool", Box::new(aap_case(AapVariant::NoPool))),
        ("channel_attention", Box::new(attention_case)),
        ("gate_attribute", Box::new(gate_case)),
        ("bilinear_fuse", Box::new(bilinear_case)),
        ("fusion_score", Box::new(fusion_case("fusion_score", OutputMode::Score, true))),
        (
            "fusion_distribution",
            Box::new(fusion_case("fusion_distribution", OutputMode::Distribution, true)),
        ),
        ("fusion_plain", Box::new(fusion_case("fusion_plain", OutputMode::Score, false))),
        ("model_miniature", Box::new(model_case)),
        ("mse", Box::new(mse_case)),
        ("emd", Box::new(emd_case)),
        ("relative_relation_loss", Box::new(relative_case)),
    ]
}

pub fn block_names() -> Vec<&'static str> {
    builders().into_iter().map(|(n, _)| n).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub seeds: usize,
    pub worst: f64,
    /// Seed and entry of the worst error.
    pub worst_at: String,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_pair: (f64, f64),
    /// Largest absolute gap between analytic and numeric over every entry.
    pub max_abs_error: f64,
    /// Seeds whose worst relative error exceeds the tolerance.
    pub failed_seeds: usize,
    /// Draws rejected for sitting too close to a kink.
    pub redraws: usize,
    pub checked: usize,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.worst <= GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub results: Vec<BlockResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(BlockResult::passed)
    }
}

fn run_block(index: usize, name: &str, build: &Builder, seeds: usize) -> Result<BlockResult> {
    let mut res = BlockResult {
        block: name.to_string(),
        seeds,
        worst: 0.0,
        worst_at: String::new(),
        worst_pair: (0.0, 0.0),
        max_abs_error: 0.0,
        failed_seeds: 0,
        redraws: 0,
        checked: 0,
    };
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let case = loop {
            let case = build(&mut rng)?;
            if case.margin > KINK_MARGIN {
                break case;
            }
            res.redraws += 1;
            if res.redraws > MAX_REDRAWS * seeds {
                return Err(Error::invalid(
                    "gradient_suite",
                    format!("{name}: could not draw inputs away from kinks"),
                ));
            }
        };
        // random output weighting, so that constant-sum outputs are still probed
        let outputs = case.block.forward(&case.params, &case.inputs)?;
        let probe: Vec<Tensor> = outputs
            .iter()
            .map(|o| uniform(&mut rng, &o.shape, -1.0, 1.0))
            .collect();
        let r = finite_diff_check_report(&case.block, &case.inputs, &case.params, DEFAULT_EPS, Some(&probe))?;
        res.checked += r.checked;
        res.max_abs_error = res.max_abs_error.max(r.max_abs_error);
        if r.max_rel_error > GRAD_TOLERANCE {
            res.failed_seeds += 1;
        }
        if r.max_rel_error > res.worst || res.worst_at.is_empty() {
            res.worst = res.worst.max(r.max_rel_error);
            res.worst_at = format!("seed {seed}: {}", r.worst);
            res.worst_pair = r.worst_pair;
        }
    }
    Ok(res)
}

/// Run the named blocks (all when `only` is empty) over `seeds` draws each.
pub fn run_suite(seeds: usize, only: &[&str]) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut results = Vec::new();
    for (i, (name, build)) in builders().iter().enumerate() {
        if only.is_empty() || only.contains(name) {
            results.push(run_block(i, name, build, seeds)?);
        }
    }
    if results.is_empty() {
        return Err(Error::invalid("gradient_suite", format!("no block named {only:?}")));
    }
    Ok(SuiteReport {
        tolerance: GRAD_TOLERANCE,
        results,
        elapsed: started.elapsed(),
    })
}

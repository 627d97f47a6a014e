//! Fully connected layers and the two-layer perceptron used throughout the fusion network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BlockParams, GradStore, ParamId, Tensor};

/// `W·x + b` for a row-major `m x n` weight.
pub fn linear_forward(x: &[f64], weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = match weight.shape.as_slice() {
        &[m, n] => (m, n),
        s => return Err(Error::shape("linear", format!("weight W must be rank 2, got {s:?}"))),
    };
    if x.len() != n {
        return Err(Error::shape(
            "linear",
            format!("input x has {} entries but W is {m}x{n}", x.len()),
        ));
    }
    if bias.len() != m {
        return Err(Error::shape(
            "linear",
            format!("bias b has {} entries but W is {m}x{n}", bias.len()),
        ));
    }
    Ok(affine(&weight.data, bias, x, m, n))
}

#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            b[i] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
        })
        .collect()
}

/// Dense layer whose weight and bias live in a shared [`BlockParams`] store.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.insert_glorot(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            in_dim,
            out_dim,
            rng,
        )?;
        let bias = params.insert_zeros(format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, params: &BlockParams, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!(
                    "`{}` expects {} inputs, got {}",
                    params.name(self.weight),
                    self.in_dim,
                    x.len()
                ),
            ));
        }
        Ok(affine(
            params.value(self.weight),
            params.value(self.bias),
            x,
            self.out_dim,
            self.in_dim,
        ))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        x: &[f64],
        dy: &[f64],
    ) -> Vec<f64> {
        let (m, n) = (self.out_dim, self.in_dim);
        {
            let gw = grads.get_mut(self.weight);
            for i in 0..m {
                let d = dy[i];
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[i * n..(i + 1) * n];
                row.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
            }
        }
        grads
            .get_mut(self.bias)
            .iter_mut()
            .zip(dy)
            .for_each(|(g, d)| *g += d);
        let w = params.value(self.weight);
        let mut dx = vec![0.0; n];
        for i in 0..m {
            let d = dy[i];
            if d == 0.0 {
                continue;
            }
            let row = &w[i * n..(i + 1) * n];
            dx.iter_mut().zip(row).for_each(|(g, a)| *g += d * a);
        }
        dx
    }
}

/// Hidden width rule: `max(ceil(c / ratio), 4)`.
pub fn hidden_width(input_dim: usize, reduction: usize) -> usize {
    input_dim.div_ceil(reduction.max(1)).max(4)
}

pub(crate) fn min_abs(v: &[f64]) -> f64 {
    v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

/// Linear -> ReLU -> Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

/// Activations kept from [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    hidden: Vec<f64>,
}

impl Mlp {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(params, &format!("{name}.fc1"), in_dim, hidden, rng)?,
            second: Linear::new(params, &format!("{name}.fc2"), hidden, out_dim, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn forward(&self, params: &BlockParams, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut hidden = self.first.forward(params, x)?;
        super::activation::relu_in_place(&mut hidden);
        let out = self.second.forward(params, &hidden)?;
        Ok((out, MlpCache { hidden }))
    }

    /// Smallest |hidden pre-activation|: distance of `x` from a ReLU kink.
    pub(crate) fn kink_margin(&self, params: &BlockParams, x: &[f64]) -> Result<f64> {
        Ok(min_abs(&self.first.forward(params, x)?))
    }

    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        x: &[f64],
        cache: &MlpCache,
        dy: &[f64],
    ) -> Vec<f64> {
        let mut dh = self.second.backward(params, grads, &cache.hidden, dy);
        super::activation::relu_backward_in_place(&cache.hidden, &mut dh);
        self.first.backward(params, grads, x, &dh)
    }
}

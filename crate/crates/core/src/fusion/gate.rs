//! Per-attribute gate: `z_i = sigmoid(MLP_i(x_i)) ⊙ o`.

use rand::Rng;

use crate::diffmath::activation::sigmoid_scalar;
use crate::diffmath::linear::{hidden_width, Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::tensor::{BlockParams, GradStore};

#[derive(Debug, Clone)]
pub struct Gate {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    gate: Vec<f64>,
    mlp: MlpCache,
}

impl Gate {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        attr_dim: usize,
        joint_dim: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = hidden_width(attr_dim, reduction);
        Ok(Self {
            mlp: Mlp::new(params, name, attr_dim, hidden, joint_dim, rng)?,
        })
    }

    pub fn forward(&self, params: &BlockParams, x: &[f64], o: &[f64]) -> Result<(Vec<f64>, GateCache)> {
        if self.mlp.out_dim() != o.len() {
            return Err(Error::shape(
                "gate_attribute",
                format!("MLP output has {} entries but o has {}", self.mlp.out_dim(), o.len()),
            ));
        }
        let (logits, mlp) = self.mlp.forward(params, x)?;
        let gate: Vec<f64> = logits.iter().map(|&v| sigmoid_scalar(v)).collect();
        let z = gate.iter().zip(o).map(|(g, v)| g * v).collect();
        Ok((z, GateCache { gate, mlp }))
    }

    pub(crate) fn kink_margin(&self, params: &BlockParams, x: &[f64]) -> Result<f64> {
        self.mlp.kink_margin(params, x)
    }

    /// Returns `(dx, do)`.
    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        x: &[f64],
        o: &[f64],
        cache: &GateCache,
        dz: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d_logits: Vec<f64> = cache
            .gate
            .iter()
            .zip(o)
            .zip(dz)
            .map(|((&g, &v), &d)| d * v * g * (1.0 - g))
            .collect();
        let d_o = cache.gate.iter().zip(dz).map(|(g, d)| g * d).collect();
        let dx = self.mlp.backward(params, grads, x, &cache.mlp, &d_logits);
        (dx, d_o)
    }
}

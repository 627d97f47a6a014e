//! Bilinear fusion head: `W1·y1 + W2·y2 + y1ᵀ W3 y2 + b`, one parameter set per output unit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BlockParams, GradStore, ParamId, Tensor};

/// Single-unit bilinear fusion with explicit parameters. `w3` is `dim(y1) x dim(y2)`.
pub fn bilinear_fuse(y1: &[f64], y2: &[f64], w1: &[f64], w2: &[f64], w3: &Tensor, b: f64) -> Result<f64> {
    if w1.len() != y1.len() || w2.len() != y2.len() || w3.shape != [y1.len(), y2.len()] {
        return Err(Error::shape(
            "bilinear_fuse",
            format!(
                "y1 {} / y2 {} vs W1 {} / W2 {} / W3 {:?}",
                y1.len(),
                y2.len(),
                w1.len(),
                w2.len(),
                w3.shape
            ),
        ));
    }
    Ok(unit(y1, y2, w1, w2, &w3.data, b))
}

#[inline]
fn unit(y1: &[f64], y2: &[f64], w1: &[f64], w2: &[f64], w3: &[f64], b: f64) -> f64 {
    let d2 = y2.len();
    let lin1: f64 = w1.iter().zip(y1).map(|(a, v)| a * v).sum();
    let lin2: f64 = w2.iter().zip(y2).map(|(a, v)| a * v).sum();
    let mut bil = 0.0;
    for (i, &a) in y1.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &w3[i * d2..(i + 1) * d2];
        bil += a * row.iter().zip(y2).map(|(w, v)| w * v).sum::<f64>();
    }
    lin1 + lin2 + bil + b
}

#[derive(Debug, Clone)]
pub struct Bilinear {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub bias: ParamId,
    pub d1: usize,
    pub d2: usize,
    pub units: usize,
}

impl Bilinear {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        d1: usize,
        d2: usize,
        units: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w1: params.insert_glorot(format!("{name}.w1"), &[units, d1], d1, 1, rng)?,
            w2: params.insert_glorot(format!("{name}.w2"), &[units, d2], d2, 1, rng)?,
            w3: params.insert_glorot(format!("{name}.w3"), &[units, d1, d2], d1 * d2, 1, rng)?,
            bias: params.insert_zeros(format!("{name}.bias"), &[units])?,
            d1,
            d2,
            units,
        })
    }

    pub fn forward(&self, params: &BlockParams, y1: &[f64], y2: &[f64]) -> Result<Vec<f64>> {
        if y1.len() != self.d1 || y2.len() != self.d2 {
            return Err(Error::shape(
                "bilinear_fuse",
                format!(
                    "expected y1/y2 of {}/{}, got {}/{}",
                    self.d1,
                    self.d2,
                    y1.len(),
                    y2.len()
                ),
            ));
        }
        let (w1, w2, w3, b) = (
            params.value(self.w1),
            params.value(self.w2),
            params.value(self.w3),
            params.value(self.bias),
        );
        let (d1, d2) = (self.d1, self.d2);
        Ok((0..self.units)
            .map(|u| {
                unit(
                    y1,
                    y2,
                    &w1[u * d1..(u + 1) * d1],
                    &w2[u * d2..(u + 1) * d2],
                    &w3[u * d1 * d2..(u + 1) * d1 * d2],
                    b[u],
                )
            })
            .collect())
    }

    /// Returns `(dy1, dy2)`.
    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        y1: &[f64],
        y2: &[f64],
        d_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (d1, d2) = (self.d1, self.d2);
        let mut dy1 = vec![0.0; d1];
        let mut dy2 = vec![0.0; d2];
        let w1 = params.value(self.w1);
        let w2 = params.value(self.w2);
        let w3 = params.value(self.w3);
        for (u, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let gw1 = &mut grads.get_mut(self.w1)[u * d1..(u + 1) * d1];
            gw1.iter_mut().zip(y1).for_each(|(a, v)| *a += g * v);
            let gw2 = &mut grads.get_mut(self.w2)[u * d2..(u + 1) * d2];
            gw2.iter_mut().zip(y2).for_each(|(a, v)| *a += g * v);
            grads.get_mut(self.bias)[u] += g;
            let gw3 = &mut grads.get_mut(self.w3)[u * d1 * d2..(u + 1) * d1 * d2];
            for (i, &a) in y1.iter().enumerate() {
                let row = &mut gw3[i * d2..(i + 1) * d2];
                row.iter_mut().zip(y2).for_each(|(w, v)| *w += g * a * v);
            }
            let w3u = &w3[u * d1 * d2..(u + 1) * d1 * d2];
            for i in 0..d1 {
                let row = &w3u[i * d2..(i + 1) * d2];
                let mut acc = w1[u * d1 + i];
                for j in 0..d2 {
                    acc += row[j] * y2[j];
                    dy2[j] += g * y1[i] * row[j];
                }
                dy1[i] += g * acc;
            }
            for j in 0..d2 {
                dy2[j] += g * w2[u * d2 + j];
            }
        }
        (dy1, dy2)
    }
}

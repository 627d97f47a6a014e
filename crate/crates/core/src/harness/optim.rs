use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BlockParams, GradStore, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    frozen: Vec<bool>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &BlockParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            frozen: vec![false; params.len()],
            step: 0,
        }
    }

    /// Exclude a parameter from updates, including weight decay.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }
}

/// One bias-corrected Adam step. Weight decay is decoupled and applied first:
/// `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + ε)`.
pub fn adam_step(
    params: &mut BlockParams,
    grads: &GradStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.slots().len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.slots().len(),
                state.m.len()
            ),
        ));
    }
    for (i, ((_, t), g)) in params.iter().zip(grads.slots()).enumerate() {
        if t.shape != g.shape {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i} is {:?} but its gradient is {:?}", t.shape, g.shape),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, theta), g)) in params.iter_mut().zip(grads.slots()).enumerate() {
        if state.frozen[i] {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in theta.data.iter_mut().enumerate() {
            let gk = g.data[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            *w -= cfg.lr * cfg.weight_decay * *w;
            *w -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
        }
    }
}

/// Reduce-on-plateau tracker. An epoch improves when its loss is strictly
/// below the best seen so far; after `patience` consecutive non-improving
/// epochs a reduction fires and the counter restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns the multiplier to apply when a reduction fires.
    pub fn observe(&mut self, loss: f64) -> Option<f64> {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.bad_epochs = 0;
            return Some(self.cfg.factor);
        }
        None
    }
}

/// Replay a loss history; returns `(epoch, factor)` for every reduction, with
/// 1-based epochs.
pub fn plateau_events(history: &[f64], cfg: &PlateauConfig) -> Vec<(usize, f64)> {
    let mut p = Plateau::new(*cfg);
    history
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| p.observe(l).map(|f| (i + 1, f)))
        .collect()
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ModelConfig, OutputMode};
use crate::losses::LossConfig;

use super::optim::{AdamConfig, PlateauConfig};

/// Everything that determines a training run besides the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Weight of the relative-relation term.
    pub lambda: f64,
    pub relative_loss: bool,
    pub seed: u64,
    pub flip: bool,
    /// When false, only the interaction network is updated.
    pub train_extractors: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_patience: 5,
            plateau_factor: 0.1,
            early_stop_patience: 10,
            max_epochs: 100,
            lambda: 0.05,
            relative_loss: true,
            seed: 0,
            flip: true,
            train_extractors: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }

    pub fn mode(&self) -> OutputMode {
        self.model.fusion.mode
    }

    pub fn relative_active(&self) -> bool {
        self.relative_loss && self.lambda > 0.0
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            mode: self.mode(),
            lambda: if self.relative_loss { self.lambda } else { 0.0 },
            emd_exponent: 2.0,
            buckets: self.model.fusion.buckets,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.plateau_patience,
            factor: self.plateau_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("train_config", d));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.relative_active() && self.batch_size < 5 {
            return bad("batch_size must be >= 5 when the relative loss is on");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return bad("patience values and max_epochs must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        self.model.validate()
    }
}

//! Text checkpoints (JSON: model config plus `name -> {shape, data}`) and the
//! attention-weight export table.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            model: model.cfg.clone(),
            params: model.params.entries().clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        for (name, t) in &ck.params {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{name}` declares {:?} but stores {} values", t.shape, t.data.len()),
                ));
            }
        }
        Ok(ck)
    }

    /// Rebuild a model, using `cfg` instead of the stored architecture when given.
    pub fn to_model(&self, cfg: Option<&ModelConfig>) -> Result<Model> {
        let cfg = cfg.cloned().unwrap_or_else(|| self.model.clone());
        let mut model = Model::new(cfg, 0)?;
        model.params.load_from(&self.params)?;
        Ok(model)
    }
}

/// Write `id,w0,w1,...` rows, one per sample.
pub fn write_attention_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = Vec::new();
    let width = rows.first().map_or(0, |r| r.1.len());
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..width).map(|i| format!("w{i}")))
        .collect();
    writeln!(out, "{}", header.join(",")).expect("vec write");
    for (id, weights) in rows {
        let cells: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
        writeln!(out, "{id},{}", cells.join(",")).expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_attention_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        what: "attention export",
        detail,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut cells = line.split(',');
            let id = cells.next().ok_or_else(|| bad("empty row".into()))?.to_string();
            let weights = cells
                .map(|c| c.parse::<f64>().map_err(|e| bad(format!("{c}: {e}"))))
                .collect::<Result<_>>()?;
            Ok((id, weights))
        })
        .collect()
}

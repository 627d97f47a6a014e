use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::batches::build_batches;
use super::config::TrainConfig;
use super::optim::{adam_step, AdamState, Plateau};
use crate::datagen::{load_split, Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::{write_attention_csv, Checkpoint, Model, ModelConfig, OutputMode, Prediction};
use crate::losses::{emd_loss, mse_loss, total_loss, Label};
use crate::metrics::{evaluate_split, EvalReport};
use crate::tensor::{GradStore, ParamId};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "eval.json";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const CSV_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.lr, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Manifest lines or records that were unreadable or invalid.
    pub skipped_records: usize,
    /// Total loss of the first optimization step, at the initial parameters.
    pub first_batch_loss: Option<f64>,
    pub test: Option<EvalReport>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Model restored to the parameters of the best validation epoch.
    pub model: Model,
}

/// Generator for everything random within one epoch: first the shuffle seed,
/// then one flip coin per sample in batch order.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn labels_of(samples: &[Sample]) -> Vec<f64> {
    samples.iter().map(|s| s.label.score).collect()
}

/// Supervision-only loss over a split at the current parameters.
pub fn supervision_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("supervision_loss"));
    }
    let preds: Vec<Prediction> = samples
        .par_iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<_>>()?;
    match model.cfg.fusion.mode {
        OutputMode::Score => {
            let p: Vec<f64> = preds.iter().map(|p| p.score).collect();
            Ok(mse_loss(&p, &labels_of(samples))?.0)
        }
        OutputMode::Distribution => {
            let mut sum = 0.0;
            for (p, s) in preds.iter().zip(samples) {
                let (pd, gd) = match (&p.distribution, &s.label.distribution) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::invalid("supervision_loss", "missing distribution")),
                };
                sum += emd_loss(pd, gd, 2.0)?.0;
            }
            Ok(sum / samples.len() as f64)
        }
    }
}

fn sum_in_order(stores: Vec<GradStore>, template: &GradStore) -> GradStore {
    let mut acc = template.clone();
    for g in &stores {
        acc.accumulate(g);
    }
    acc
}

/// Run one optimization step on `indices`; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut Model,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    train: &[Sample],
    indices: &[usize],
    flips: &[bool],
    relative_exempt: bool,
    coords: (usize, usize),
) -> Result<f64> {
    let loss_cfg = cfg.loss();
    let diverged = |cause: String| Error::NonFiniteLoss {
        epoch: coords.0,
        batch: coords.1,
        cause,
    };
    let outputs: Vec<_> = indices
        .par_iter()
        .zip(flips)
        .map(|(&i, &flip)| {
            let img = &train[i].image;
            if flip {
                model.forward(&img.flip_horizontal())
            } else {
                model.forward(img)
            }
        })
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::NonFinite { .. } => diverged(e.to_string()),
            e => e,
        })?;
    let preds: Vec<Prediction> = outputs.iter().map(|o| o.0.clone()).collect();
    let labels: Vec<Label> = indices.iter().map(|&i| train[i].label.clone()).collect();
    let loss = total_loss(&preds, &labels, &loss_cfg, !relative_exempt)?;
    if !loss.total.is_finite() {
        return Err(diverged(format!("total loss {}", loss.total)));
    }
    let template = model.params.zero_grads_like();
    let stores: Vec<GradStore> = outputs
        .par_iter()
        .enumerate()
        .map(|(k, (_, cache))| {
            let mut g = template.clone();
            let dd = loss.d_dist.as_ref().map(|d| d[k].as_slice());
            model.backward(&mut g, cache, loss.d_score[k], dd, cfg.train_extractors)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let grads = sum_in_order(stores, &template);
    let mut adam = cfg.adam();
    adam.lr = lr;
    adam_step(&mut model.params, &grads, state, &adam)?;
    Ok(loss.total)
}

/// Train on the manifest's train split, select parameters by validation loss
/// (falling back to training loss when the validation split is empty) and
/// evaluate them on the test split. With `out_dir`, writes the per-epoch log,
/// the best checkpoint, the test report and the attention export there.
pub fn train(cfg: &TrainConfig, manifest: &Manifest, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = cfg.model.image_size;
    let buckets = cfg.model.fusion.buckets;
    let (train_set, s1) = load_split(manifest, Split::Train, size, buckets);
    let (val_set, s2) = load_split(manifest, Split::Val, size, buckets);
    let (test_set, s3) = load_split(manifest, Split::Test, size, buckets);
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut state = AdamState::new(&model.params);
    if !cfg.train_extractors {
        for i in 0..model.params.len() {
            if model.is_extractor_param(ParamId(i)) {
                state.freeze(ParamId(i));
            }
        }
    }
    let mut plateau = Plateau::new(cfg.plateau());
    let mut lr = cfg.lr;
    let scores = labels_of(&train_set);
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        skipped_records: s1 + s2 + s3,
        first_batch_loss: None,
        test: None,
    };
    let mut best = (f64::INFINITY, model.params.entries().clone());
    let mut since_best = 0;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let plans = build_batches(&scores, cfg.batch_size, rng.random());
        let mut weighted = 0.0;
        for (b, plan) in plans.iter().enumerate() {
            let flips: Vec<bool> = plan
                .indices
                .iter()
                .map(|_| cfg.flip && rng.random_bool(0.5))
                .collect();
            let l = train_batch(
                &mut model,
                &mut state,
                cfg,
                lr,
                &train_set,
                &plan.indices,
                &flips,
                plan.relative_exempt,
                (epoch, b + 1),
            )?;
            log.first_batch_loss.get_or_insert(l);
            weighted += l * plan.indices.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            supervision_loss(&model, &val_set)?
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                cause: format!("validation loss {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        let _ = writeln!(csv, "{}", record.csv_row());
        log.epochs.push(record);
        if let Some(dir) = out_dir {
            let path = dir.join(LOG_FILE);
            fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        }

        if val_loss < best.0 {
            best = (val_loss, model.params.entries().clone());
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(f) = plateau.observe(val_loss) {
            lr *= f;
        }
        if since_best >= cfg.early_stop_patience {
            log.stopped_early = true;
            break;
        }
    }

    model.params.load_from(&best.1)?;
    if !test_set.is_empty() {
        log.test = Some(evaluate_split(&model, &test_set)?);
    }
    if let Some(dir) = out_dir {
        Checkpoint::from_model(&model).save(&dir.join(CHECKPOINT_FILE))?;
        if let Some(report) = &log.test {
            let path = dir.join(REPORT_FILE);
            fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
            if model.cfg.fusion.interaction {
                write_attention_csv(&dir.join(ATTENTION_FILE), &attention_rows(&model, &test_set)?)?;
            }
        }
    }
    Ok(TrainOutcome { log, model })
}

/// Channel-attention weights per sample (interaction mode only).
pub fn attention_rows(model: &Model, samples: &[Sample]) -> Result<Vec<(String, Vec<f64>)>> {
    samples
        .par_iter()
        .map(|s| {
            let (_, cache) = model.forward(&s.image)?;
            let w = cache
                .fusion
                .attention()
                .ok_or_else(|| Error::invalid("attention_rows", "model has no attention stage"))?
                .weights
                .clone();
            Ok((s.id.clone(), w))
        })
        .collect()
}

/// Load a checkpoint and evaluate it on one split of a manifest. `arch`
/// overrides the stored architecture; parameters that do not fit it are a
/// shape error.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Manifest,
    split: Split,
    arch: Option<&ModelConfig>,
) -> Result<(EvalReport, usize)> {
    let model = Checkpoint::load(checkpoint)?.to_model(arch)?;
    let (samples, skipped) = load_split(
        manifest,
        split,
        model.cfg.image_size,
        model.cfg.fusion.buckets,
    );
    if samples.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            format!("no usable `{split}` samples ({skipped} skipped)"),
        ));
    }
    Ok((evaluate_split(&model, &samples)?, skipped))
}

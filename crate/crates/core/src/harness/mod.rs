//! Optimization and the training/evaluation loop.

pub mod batches;
pub mod config;
pub mod optim;
pub mod train;

pub use batches::{build_batches, BatchPlan};
pub use config::TrainConfig;
pub use optim::{adam_step, plateau_events, AdamConfig, AdamState, Plateau, PlateauConfig};
pub use train::{
    attention_rows, epoch_rng, evaluate_checkpoint, supervision_loss, train, EpochRecord, TrainLog,
    TrainOutcome, ATTENTION_FILE, CHECKPOINT_FILE, CSV_HEADER, LOG_FILE, REPORT_FILE,
};

//! Seeded training loop: batching, the per-variant objective, Adam, the
//! warmup/step-decay schedule and resumable checkpoints.
//!
//! Everything runs on one thread, so a run is a pure function of its
//! config and dataset.

mod adam;
mod batch;
mod checkpoint;
mod config;
mod objective;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use batch::{sample_batch, Batch};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{AdamHyper, LossVariant, Preset, TrainConfig, TOY_BETA};
pub use objective::{build_objective, Objective};
pub use schedule::{lr_at, LrSchedule};
pub use trainer::{evaluate, metrics_csv, train, EpochMetrics, EvalReport, TrainOutcome, Trainer, METRICS_HEADER};

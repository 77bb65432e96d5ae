//! Desk-scale trainer for the AR and masked-diffusion objectives.

pub mod adamw;
pub mod corpus;
pub mod corrupt;
pub mod model;
pub mod objective;
pub mod train;

pub use adamw::{AdamW, AdamWConfig, Schedule};
pub use corpus::MarkovChain;
pub use corrupt::{corrupt, corrupt_with, CorruptedBatch};
pub use model::{AttnMode, ToyModel, ToyModelConfig};
pub use objective::{ar_loss, batch_loss, diffusion_loss, grad_check, Batch, Objective};
pub use train::{eval_diffusion_nll, sweep, train, write_metrics_csv, EpochMetrics, SweepConfig, SweepRun, TrainConfig, TrainOutcome};

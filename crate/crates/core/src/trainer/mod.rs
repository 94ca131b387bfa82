//! Training, evaluation and checkpointing of the base, gcl and vcl variants.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod run;
pub mod train;

pub use adam::{optimizer_step, AdamState};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use model::{ForwardTrace, Model, ModelConfig, ModelParams, Slot};
pub use run::{run_experiment, MetricRow, RunOptions, RunResult};
pub use train::{batch_loss, evaluate, train_epoch, ClassTargets, EpochReport, Evaluation, TensorData, TrainerState};

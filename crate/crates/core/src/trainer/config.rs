use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dvc::ScheduleConfig;
use crate::error::{Error, Result};
use crate::losses::Variant;

/// Training hyperparameters. Defaults are the desk-scale schedule: 120
/// epochs with label fusion starting at epoch 40.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// ι: number of epochs, numbered `0..epochs`.
    pub epochs: usize,
    pub kappa: usize,
    pub tau: usize,
    pub rho_max: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Evaluate and checkpoint after every `eval_every` epochs (and after the last).
    pub eval_every: usize,
    /// Checkpoint directory; `<output>/checkpoints` when absent.
    pub checkpoint_path: Option<PathBuf>,
    pub dataset_path: PathBuf,
    pub channels: usize,
    pub latent: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Vcl,
            epochs: 120,
            kappa: 40,
            tau: 5,
            rho_max: 0.5,
            lambda: 1.0,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 10,
            checkpoint_path: None,
            dataset_path: PathBuf::from("data"),
            channels: 16,
            latent: 32,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<ScheduleConfig> {
        ScheduleConfig::new(self.kappa, self.tau, self.epochs, self.rho_max)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.channels == 0 || self.latent == 0 {
            return Err(Error::Config("channels and latent must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether `epoch` (0-indexed) ends with an evaluation and checkpoint.
    pub fn is_eval_epoch(&self, epoch: usize) -> bool {
        (epoch + 1).is_multiple_of(self.eval_every) || epoch + 1 == self.epochs
    }
}

//! Optimization harness for both animation branches, checkpoints, and the
//! pose-retrieval baseline.

mod baseline;
mod checkpoint;
mod content;
mod data;
mod speaker;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

pub use baseline::{retrieval_baseline, RetrievalMode};
pub use checkpoint::Checkpoint;
pub use content::{train_content, ContentTrainer};
pub use data::{Clip, Dataset, Split};
pub use speaker::{train_speaker, LandmarkSource, SpeakerTrainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Frames per step for the content branch, windows per step for the
    /// speaker branch.
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub mu_s: f64,
    /// Validation interval in steps; 0 disables intermediate validation.
    pub eval_every: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 64,
            max_steps: 1000,
            seed: 0,
            lambda_c: 1.0,
            lambda_s: 1.0,
            mu_s: 1e-3,
            eval_every: 100,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lambda_c < 0.0 || self.lambda_s < 0.0 || self.mu_s < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..Default::default() }
    }

    /// Generator for the batch drawn at `step`. Depends only on the seed and
    /// the step, so a resumed run draws the same batches.
    pub(crate) fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation state (the final state when there is no validation set).
    pub checkpoint: Checkpoint,
    /// Per-step training loss, normalized per frame.
    pub losses: Vec<f64>,
    /// Per-step discriminator loss (speaker branch only).
    pub disc_losses: Vec<f64>,
    /// `(step, loss)` validation points.
    pub val_losses: Vec<(u64, f64)>,
}

pub(crate) fn check_finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { step, msg: format!("{what} became {v}; try a lower learning rate or gradient clipping") })
    }
}

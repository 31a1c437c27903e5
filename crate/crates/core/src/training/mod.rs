//! Two-stage training: AdamW, cosine annealing with warm restarts, early
//! stopping on validation PSNR, checkpoints and weight transfer from the
//! colorization stage to the super-resolution stage.

pub mod checkpoint;
mod early_stop;
mod optim;
mod runner;
mod schedule;

use serde::{Deserialize, Serialize};

pub use crate::data::Stage;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use early_stop::{decide, Decision, EarlyStopper};
pub use optim::{adamw_update, AdamW, AdamWConfig};
pub use runner::{
    evaluate, run_stage, train_step, transfer_stage1_to_stage2, Evaluation, RunOptions, StageData,
    StageOutcome, TrainLogRecord, TransferReport, LOG_HEADER,
};
pub use schedule::CosineWarmRestarts;

/// Optimization hyperparameters of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub sched_t0: usize,
    pub sched_tmult: usize,
    pub lambda: f64,
    /// Downscale factor of the super-resolution degradation.
    pub scale: usize,
    pub seed: u64,
    /// Fill the `seconds` log column. Off by default so logs are
    /// reproducible byte for byte.
    pub log_wall_clock: bool,
    /// Validation outputs written as PNG after each epoch.
    pub sample_images: usize,
}

impl TrainConfig {
    /// Defaults of each stage: colorization pre-training at 2e-4 for at most
    /// 100 epochs (patience 20), super-resolution fine-tuning at 5e-5 for at
    /// most 400 epochs (patience 40).
    pub fn for_stage(stage: Stage) -> Self {
        let (lr_init, max_epochs, patience) = match stage {
            Stage::Colorization => (2e-4, 100, 20),
            Stage::SuperResolution => (5e-5, 400, 40),
        };
        Self {
            stage,
            lr_init,
            lr_min: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_epochs,
            patience,
            sched_t0: 10,
            sched_tmult: 2,
            lambda: 0.2,
            scale: 4,
            seed: 0,
            log_wall_clock: false,
            sample_images: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return fail(format!(
                "need 0 <= lr_min <= lr_init and lr_init > 0, got {} and {}",
                self.lr_min, self.lr_init
            ));
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return fail(format!(
                "patience {} must be in [1, max_epochs = {})",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.sched_t0 == 0 || self.sched_tmult == 0 || self.scale == 0 {
            return fail("batch_size, sched_t0, sched_tmult and scale must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig::with_lambda(self.lambda)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> CosineWarmRestarts {
        CosineWarmRestarts {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            t0: self.sched_t0,
            tmult: self.sched_tmult,
        }
    }
}

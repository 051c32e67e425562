//! Training: L2 loss, Adam, step-decay schedule, the patch training loop,
//! `.cbck` checkpoints and the ablation sweep.

mod ablate;
mod adam;
pub mod checkpoint;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub use ablate::{ablate, AblationAxis, AblationRow, AblationTable, ModuleSet};
pub use adam::{adam_step, adam_update, AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, Progress,
};
pub use trainer::{loss_trace_csv, StepRecord, Trainer};

/// Training hyperparameters. The network architecture travels alongside
/// (see [`Trainer::new`]) rather than inside this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier applied every `lr_decay_epochs` epochs.
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Label patch side; the network sees `label_extent / spatial_factor`.
    pub label_extent: usize,
    pub label_frames: usize,
    /// Patches drawn from each clip per epoch.
    pub patches_per_clip: usize,
    /// Optional global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr0: 1e-4,
            lr_decay: 0.5,
            lr_decay_epochs: 60,
            beta1: 0.5,
            beta2: 0.99,
            epsilon: 1e-8,
            max_epochs: 1,
            seed: 0,
            label_extent: 128,
            label_frames: 7,
            patches_per_clip: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_epochs == 0 {
            return fail("epsilon, lr_decay and lr_decay_epochs must be positive".into());
        }
        if self.label_frames < 3 || self.label_frames.is_multiple_of(2) {
            return fail(format!("label_frames must be odd and >= 3, got {}", self.label_frames));
        }
        if self.patches_per_clip < 1 {
            return fail("patches_per_clip must be >= 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// `lr0 * lr_decay ^ floor(epoch / lr_decay_epochs)`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_epochs) as i32)
}

/// Mean squared error.
pub fn l2_loss(tape: &Tape, pred: &Var, target: &Var) -> Result<Var> {
    tape.mse(pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &c), 1e-4);
        assert_eq!(lr_at_epoch(59, &c), 1e-4);
        assert_eq!(lr_at_epoch(60, &c), 5e-5);
        assert_eq!(lr_at_epoch(125, &c), 2.5e-5);
    }

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
            TrainConfig { label_frames: 6, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

//! Adversarial contrastive pretraining, fine-tuning, evaluation and the
//! fixed-intensity baseline grid.
//!
//! In one pretraining step both views come from the same batch and two
//! independent noise bundles. The encoder takes a descent step on the
//! contrastive loss while the augmentation parameters take an ascent step:
//! their tape leaves pass through a gradient reversal, so a single backward
//! pass yields both update directions.

mod adam;
mod finetune;
mod grid;
mod metrics;
mod pretrain;
mod runlog;

pub use adam::{adam_step, OptimizerState};
pub use finetune::{finetune, predict, train_supervised, FinetuneMode};
pub use grid::{baseline_grid, write_grid_csv, write_grid_table, GridRow, DEFAULT_GRID_SIGMAS, GRID_HEADER};
pub use metrics::{accuracy, argmax_rows, auc, evaluate, macro_f1, sensitivity_specificity, Metrics};
pub use pretrain::{
    adversarial_probe, contrastive_loss, embed, knn_accuracy, pretrain_adversarial, pretrain_fixed, PretrainOutput,
    ProbeOutcome, PROBE_LR,
};
pub use runlog::{EpochRecord, LogEntry, RunLog, StepRecord, TRAJECTORY_HEADER};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentBounds, AugmentError, MagWarpMode};
use crate::contrastive::{ContrastiveError, DEFAULT_TEMPERATURE};
use crate::data::DataError;
use crate::encoder::{EncoderConfig, EncoderError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("run log: {0}")]
    RunLog(String),
    #[error("non-finite loss at step {step}; last record: {last}")]
    Diverged { step: u64, last: String },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl TrainError {
    /// A forward pass met an out-of-domain value, which during training means
    /// the parameters or inputs went non-finite.
    pub fn is_domain(&self) -> bool {
        use crate::autodiff::AutodiffError::Domain;
        matches!(
            self,
            TrainError::Autodiff(Domain { .. })
                | TrainError::Encoder(EncoderError::Autodiff(Domain { .. }))
                | TrainError::Augment(AugmentError::Autodiff(Domain { .. }))
                | TrainError::Contrastive(ContrastiveError::Autodiff(Domain { .. }))
        )
    }
}

/// Which pretraining the pipeline runs before fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Leaves,
    FixedSigma,
    Supervised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Stops pretraining after this many steps when set.
    pub max_steps: Option<u64>,
    pub encoder_lr: f64,
    /// Zero freezes the augmentation parameters.
    pub leaves_lr: f64,
    pub finetune_lr: f64,
    pub temperature: f64,
    pub bounds: AugmentBounds,
    pub label_fraction: f64,
    pub mode: TrainMode,
    /// Shared intensity of the fixed-sigma baseline.
    pub fixed_sigma: f64,
    pub finetune_mode: FinetuneMode,
    pub mag_warp_mode: MagWarpMode,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            pretrain_epochs: 20,
            finetune_epochs: 100,
            max_steps: None,
            encoder_lr: 1e-3,
            leaves_lr: 1e-3,
            finetune_lr: 1e-3,
            temperature: DEFAULT_TEMPERATURE,
            bounds: AugmentBounds::default(),
            label_fraction: 0.1,
            mode: TrainMode::Leaves,
            fixed_sigma: 0.03,
            finetune_mode: FinetuneMode::Full,
            mag_warp_mode: MagWarpMode::Multiplicative,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.encoder_lr) && positive(self.finetune_lr)) {
            return bad("learning rates must be positive");
        }
        if !(self.leaves_lr.is_finite() && self.leaves_lr >= 0.0) {
            return bad("leaves learning rate must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label fraction must be in (0, 1]");
        }
        if !positive(self.temperature) {
            return bad("temperature must be positive");
        }
        if !(self.fixed_sigma.is_finite() && self.fixed_sigma >= 0.0) {
            return bad("fixed sigma must be non-negative");
        }
        self.bounds.validate()?;
        Ok(())
    }

    /// Encoder layout for data with `channels` channels and `classes` classes.
    pub fn encoder_for(&self, channels: usize, classes: usize) -> EncoderConfig {
        EncoderConfig {
            channels_in: channels,
            classes,
            ..self.encoder.clone()
        }
    }
}

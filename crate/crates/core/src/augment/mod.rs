//! Differentiable, learnable time-series augmentations.
//!
//! A view is generated as jitter, scale, magnitude warp, time distortion and
//! segment permutation applied in that order. Every intensity is a bounded
//! map of an unconstrained parameter, and all randomness for one pass lives in
//! a [`NoiseBundle`], so the view is a deterministic, differentiable function
//! of the parameters. The time-warp baseline is provided for fixed-intensity
//! comparisons only and has no gradient.

mod checkpoint;
mod faithfulness;
mod leaves;
mod noise;
mod params;
mod permute;
mod reparam;
mod time_distort;
mod transforms;

pub use checkpoint::{load_augment_checkpoint, save_augment_checkpoint};
pub use faithfulness::{faithfulness_proxy, write_preview_csv, Faithfulness};
pub use leaves::{
    augment_view, fixed_intensity_view, leaves_forward, noise_shape, FixedIntensity, GradientFault, LeavesOptions,
    LeavesView,
};
pub use noise::{NoiseBundle, NoiseShape};
pub use params::{
    hard_segments, relaxed_segments, AugmentBounds, AugmentParams, AugmentVars, EffectiveParams, PARAM_NAMES,
    SATURATED_RAW,
};
pub use permute::{
    permutation_index, permute, permute_with_counts, segment_bounds, segment_order, PermuteOutput, SegmentAnchor,
};
pub use reparam::{
    normal_field, reparam_normal, reparam_relaxed_bernoulli, reparam_uniform, standard_normal, BernoulliLogit,
    RelaxedBernoulli,
};
pub use time_distort::{identity_grid, time_distort, GmmVars, TimeDistortOutput, DEGENERATE_RANGE};
pub use transforms::{
    jitter, knot_curve, knot_interpolation, knot_values, mag_warp, scale, time_warp_baseline, time_warp_positions,
    MagWarpMode,
};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid augmentation bounds: {0}")]
    InvalidBounds(String),
    #[error("expected an (N, C, L) batch, got shape {0:?}")]
    InputShape(Vec<usize>),
    #[error("shapes {left:?} and {right:?} differ")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("noise bundle has shape {got}, expected {expected}")]
    NoiseShape { expected: String, got: String },
    #[error("expected {expected} noise values, got {got}")]
    NoiseLength { expected: usize, got: usize },
    #[error("uniform draw at index {index} is outside (0, 1)")]
    UniformOutOfRange { index: usize },
    #[error("scale must be non-negative")]
    NegativeScale,
    #[error("interval low {low} exceeds high {high}")]
    InvalidInterval { low: f64, high: f64 },
    #[error("probability must lie in (0, 1)")]
    ProbabilityOutOfRange,
    #[error("temperature must be positive")]
    NonPositiveTemperature,
    #[error("{0} has no gradient and cannot be used on differentiable inputs")]
    NotDifferentiable(&'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("augmentation checkpoint: {0}")]
    Checkpoint(String),
}

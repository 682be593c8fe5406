//! Learnable time-series augmentations trained adversarially against a
//! contrastive encoder.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix the
//! element type to `f64` (default) or `f32`.

pub mod augment;
pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod gradsuite;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type AugmentParams = augment::AugmentParams<f64>;
pub type EncoderParams = encoder::EncoderParams<f64>;
pub type Dataset = data::Dataset<f64>;
pub type PretrainOutput = trainer::PretrainOutput<f64>;

pub type TensorF32 = autodiff::Tensor<f32>;
pub type AugmentParamsF32 = augment::AugmentParams<f32>;
pub type EncoderParamsF32 = encoder::EncoderParams<f32>;
pub type DatasetF32 = data::Dataset<f32>;
pub type PretrainOutputF32 = trainer::PretrainOutput<f32>;

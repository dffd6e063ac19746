//! Spatial-context positive pair sampling for self-supervised learning on
//! gridded slide images.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`ndgrad`]), a
//! synthetic slide generator ([`slidegen`]), augmentations, contextual pair
//! sampling, Barlow Twins / VICReg / BYOL objectives, SSL pretraining and
//! downstream evaluation (linear probe and attention MIL).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar type for common use.

pub mod augment;
pub mod dataset_io;
pub mod eval;
pub mod experiment;
pub mod ndgrad;
pub mod sampler;
pub mod scalar;
pub mod slidegen;
pub mod ssl;
pub mod train;

pub use scalar::Scalar;

pub type TensorF64 = ndgrad::Tensor<f64>;
pub type TensorF32 = ndgrad::Tensor<f32>;
pub type GraphF64 = ndgrad::Graph<f64>;
pub type GraphF32 = ndgrad::Graph<f32>;
pub type EncoderF64 = train::EncoderParams<f64>;
pub type EncoderF32 = train::EncoderParams<f32>;
pub type SslModelF64 = train::SslModel<f64>;
pub type SslModelF32 = train::SslModel<f32>;
pub type MilParamsF64 = eval::MilParams<f64>;
pub type MilParamsF32 = eval::MilParams<f32>;

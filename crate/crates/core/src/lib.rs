//! Patch transformer for multivariate time-series regression with additive
//! attention hints, gradient saliency, and a few-shot fine-tuning protocol.
//!
//! The compute core ([`tensor`], [`autodiff`], [`model`]) is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix it to `f64`, which is
//! what the data pipeline, training loop and CLI use.

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hinting;
pub mod manifest;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph<'a> = autodiff::Graph<'a, f64>;
pub type Model = model::Model<f64>;

//! Desk-scale laboratory for knowledge-distillation pretraining of small
//! decoder-only language models.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below pin the common instantiations.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod mechanism;
pub mod model;
pub mod numerics;
pub mod orchestration;
pub mod scalar;
pub mod synthetic;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParameterSet32 = model::ParameterSet<f32>;
pub type ParameterSet64 = model::ParameterSet<f64>;
pub type GradientSet32 = model::GradientSet<f32>;
pub type GradientSet64 = model::GradientSet<f64>;

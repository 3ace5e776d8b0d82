//! Invariant feature learning for self-supervised two-tower recommendation.
//!
//! Learnable per-field masks gate feature embeddings, a gradient-variance
//! penalty across clustered environments pushes the masks away from
//! spuriously correlated fields, and mask-guided feature dropout drives a
//! contrastive auxiliary task. The crate also ships a synthetic
//! spurious-correlation generator and a full-ranking IID/OOD evaluator.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choice.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod logging;
pub mod loss;
pub mod model;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod schema;
pub mod syndata;
pub mod tensor;
pub mod train;

pub use error::{IflError, Result};
pub use scalar::Scalar;

pub type ModelF64 = model::ModelState<f64>;
pub type ModelF32 = model::ModelState<f32>;

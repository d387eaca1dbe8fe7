//! Offline model-based reinforcement learning with adaptive behavioral priors.
//!
//! The pipeline learns an ensemble dynamics model and an advantage-weighted
//! behavioral prior from a fixed dataset, then trains a Gaussian policy on
//! model rollouts under a KL constraint toward the prior with an adaptive
//! dual temperature.

pub mod agent;
pub mod checkpoint;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod experiment;
pub mod numeric;
pub mod policy;
pub mod prior;
pub mod rng;

mod error;

pub use error::{Error, Result};
pub use numeric::Scalar;

pub type Mlp64 = numeric::Mlp<f64>;
pub type Mlp32 = numeric::Mlp<f32>;
pub type DiagGaussian64 = numeric::DiagGaussian<f64>;
pub type DiagGaussian32 = numeric::DiagGaussian<f32>;
pub type AdamState64 = numeric::AdamState<f64>;

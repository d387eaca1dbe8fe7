//! Numeric substrate: networks, Gaussians, gradients and the optimizer.

pub mod adam;
pub mod gaussian;
pub mod mlp;
pub mod params;
pub mod scalar;

pub use adam::{AdamConfig, AdamState};
pub use gaussian::{kl_rows, log_prob_rows, DiagGaussian};
pub use mlp::{Activation, Dense, Head, Mlp, MlpGrads, Trace};
pub use params::{flatten, polyak, Params};
pub use scalar::Scalar;

//! Expectation propagation and its stochastic variants on Gaussian
//! approximating families, with the oracles needed to calibrate them.
//!
//! The crate provides:
//!
//! - [`expfam`]: Gaussian natural/moment parameterizations, block-diagonal
//!   products, and the factor algebra (multiply, divide, fractional power)
//!   every algorithm is built from;
//! - [`likelihoods`]: tilted-moment computations for probit classification
//!   sites (closed form and quadrature, including fractional site powers)
//!   and Gaussian mixture clustering sites;
//! - [`inference`]: the update rules themselves: full expectation
//!   propagation, assumed-density filtering, the stochastic variant with a
//!   single tied site factor, its minibatch-parallel form, the distributed
//!   form with one factor per data partition, and the latent-variable form;
//!   plus the shared sweep driver with damping schedules, convergence
//!   detection, and trace recording;
//! - [`oracle`]: ground-truth machinery (random-walk Metropolis with
//!   multiple chains, dense-grid integration) and the calibration metrics
//!   comparing an approximation against it;
//! - [`data`]: synthetic generators, CSV ingestion, and train/test
//!   splitting.
//!
//! Everything numeric is generic over the scalar type via [`Real`]
//! (`f64` and `f32` out of the box); the crate root exports `f64` aliases
//! for the common types.

pub mod data;
pub mod error;
pub mod expfam;
pub mod inference;
pub mod likelihoods;
pub mod linalg;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod special;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` Gaussian factor in natural parameters.
pub type GaussianNatural64 = expfam::GaussianNatural<f64>;
/// `f64` Gaussian in moment parameters.
pub type GaussianMoment64 = expfam::GaussianMoment<f64>;
/// `f64` block-diagonal natural factor.
pub type BlockNatural64 = expfam::BlockNatural<f64>;
/// `f64` block-diagonal moment Gaussian.
pub type BlockMoment64 = expfam::BlockMoment<f64>;
/// `f64` categorical distribution.
pub type CategoricalDist64 = expfam::CategoricalDist<f64>;
/// `f64` run configuration.
pub type RunConfig64 = inference::RunConfig<f64>;
/// `f64` dataset.
pub type Dataset64 = data::Dataset<f64>;

//! Self-explaining variational Gaussian processes.
//!
//! The model posterior decomposes a regression function into per-feature
//! varying coefficients, each governed by its own sparse GP, so every
//! prediction comes with an exact additive attribution to the input
//! features. Training maximizes one of three evidence lower bounds that
//! differ in where prior knowledge enters: weight-space priors on the
//! coefficient processes, a function-space prior on the composed predictor,
//! or both at once.
//!
//! Start with [`model::SevgpModel`] for the posterior itself,
//! [`train::fit`] for optimization, and the `examples/` directory for
//! end-to-end walkthroughs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod experiments;
pub mod objectives;
pub mod train;

pub use data::Dataset;
pub use error::{Error, Result};
pub use gaussian::GaussianDist;
pub use kernels::KernelSpec;
pub use model::{CoefficientBlock, SevgpModel, Variant};

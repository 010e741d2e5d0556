//! Sparse principal component estimation under the spiked covariance model.
//!
//! The crate is organised around the objects of the model:
//!
//! - [`model`]: the spiked covariance, Gaussian sampling and `l_q` balls.
//! - [`eigen`]: symmetric eigendecomposition and first-order eigenvector
//!   perturbation with residual bounds.
//! - [`estimators`]: standard PCA, diagonal thresholding and the two-stage
//!   augmented sparse PCA (ASPCA) estimator.
//! - [`risk`]: the sign-invariant loss, closed-form PCA risk and a seeded
//!   Monte Carlo risk harness.
//! - [`bounds`]: minimax rate regimes and probability tail bounds.
//! - [`packing`]: sphere-packing hypothesis families, KL divergence and Fano
//!   lower bounds.
//! - [`experiment`]: configurable sweeps emitting CSV and JSON manifests.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod eigen;
mod error;
pub mod estimators;
pub mod experiment;
pub mod model;
pub mod packing;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};

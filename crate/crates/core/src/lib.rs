//! Commodity futures term structures under a two-factor mean-reverting model,
//! extended with a functional regression on the yield curve.
//!
//! The pipeline: load and align futures and yield panels ([`data`]), extract
//! orthonormal yield-curve factors with kernel PCA ([`kpca`]), build the
//! state-space model ([`model`]), calibrate it by Kalman-filter maximum
//! likelihood ([`filter`]), then produce diagnostics ([`analysis`]) and
//! yield-shock stress tests ([`stress`]).

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod filter;
pub mod kpca;
pub mod model;
pub mod optim;
pub mod rng;
mod serde_mat;
pub mod stress;

pub use error::{Error, Result};

//! Federated training of mean-field Gaussian networks on sparse weighted
//! coresets.
//!
//! Each client keeps a personal posterior and a localized copy of the global
//! posterior; the localized copy trains on a small nonnegative-weighted
//! subset of the client's data chosen by an accelerated hard-thresholding
//! solver over a likelihood embedding, and the server aggregates the
//! localized copies with damping. The crate also ships the comparison
//! baselines (federated averaging, random and submodular subset selection),
//! generalization-rate utilities, and the dataset plumbing used by the
//! command line front end.

// Validation guards are written as `!(x > 0.0)` on purpose: the negation
// rejects NaN, which `x <= 0.0` would wave through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bnn;
pub mod config;
pub mod coreset;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
mod linalg;
pub mod metrics;
pub mod rng;
pub mod theory;
pub mod variational;

pub use error::{Error, Result};

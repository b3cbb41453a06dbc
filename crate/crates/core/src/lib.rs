//! Estimates, without retraining, how much each imputed training label of a
//! time-series forecasting model helps or hurts evaluation loss, and uses the
//! estimates to splice two imputation sources into a better training set.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`dataio`] — series ingest, windowing, block-missingness simulation,
//!   mean / linear / external imputation.
//! - [`model`] — small forecasting models (linear, MLP, DLinear) with exact
//!   hand-derived gradients, per-output Jacobians and Hessian-vector products.
//! - [`train`] — deterministic SGD with early stopping and full trajectory
//!   recording.
//! - [`gain`] — the retraining-free gain estimators (full-resolution,
//!   segment-accelerated, trajectory) plus kernel axiom checks.
//! - [`influence`] — the damped influence-function baseline solved with
//!   conjugate gradients.
//! - [`oracle`] — brute-force ground truth by actual retraining.
//! - [`ensemble`] — threshold the gain matrix and splice the two label sets.
//! - [`metrics`] — estimate-vs-oracle agreement, imputation MSE, timing
//!   tables and SVG plots.

pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod gain;
pub mod influence;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod fixtures;

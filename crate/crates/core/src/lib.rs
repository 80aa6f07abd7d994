//! Reliability modeling for long autoregressive generations.
//!
//! - [`model`]: closed-form naive and two-rate success probabilities.
//! - [`ensemble`]: common-cause failure decomposition and selection rules.
//! - [`simulator`]: Monte Carlo ground truth for both.
//! - [`corpus`]: key-token metrics from per-token log-probability records.
//! - [`fitting`]: maximum-likelihood fits and AIC selection of growth regimes.

pub mod corpus;
pub mod ensemble;
pub mod fitting;
pub mod model;
pub mod simulator;
pub mod stats;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

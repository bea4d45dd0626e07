//! Surrogate-accelerated Bayesian calibration of a stochastic epidemic
//! agent-based model.
//!
//! The pipeline runs a stand-in ABM over a Halton design, fits a Gaussian-process
//! surrogate to the seed-averaged daily hospitalizations and deaths, and samples
//! one posterior with two methods: delayed-rejection adaptive Metropolis and
//! Stein variational gradient descent. The [`metrics`] module scores the two
//! calibrations against each other and against observations.

pub mod abm;
pub mod design;
pub mod dram;
pub mod error;
pub mod gp;
pub mod io;
pub mod metrics;
pub mod params;
pub mod posterior;
pub mod sensitivity;
pub mod series;
pub mod svi;

pub use error::{Error, Result};
pub use params::{Bounds, ParameterVector, N_PARAMS, PARAM_NAMES};
pub use series::DailySeries;

//! Truncated-normal Bayesian model averaging for ensemble wind-speed forecasts.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod estimation;
pub mod mixture;
pub mod quadrature;
pub mod scoring;
pub mod truncnorm;
pub mod verification;

pub use error::{Error, Result};
pub use mixture::{BmaModel, Component, ForecastCase, GroupParams, GroupSpec, Predictive};
pub use truncnorm::TruncatedNormal;

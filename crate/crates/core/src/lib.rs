//! Mixtures of Gaussian processes for wind-turbine power-curve monitoring.

pub mod data;
pub mod error;
pub mod functions;
pub mod gp;
pub mod hetgp;
pub mod monitoring;
pub mod numerics;
pub mod omgp;
pub mod optimize;
pub mod persist;
pub mod predictive;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;

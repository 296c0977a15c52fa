//! Simulation and inverse analysis of coherent x-ray control of nuclear excitons.

pub mod absorber;
pub mod error;
pub mod experiment;
pub mod pulse;
pub mod reconstruction;
pub mod signal;
pub mod stability;
pub mod tls;
pub mod units;

pub use error::{Error, Result};

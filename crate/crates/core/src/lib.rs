//! Gaussian-process psychometric field estimation.
//!
//! Probit GP models (optionally constrained to be monotone in stimulus
//! intensity) drive adaptive stimulus selection. Model coordinates are the
//! unit box; [`acquisition::DomainBox`] maps to stimulus units.

pub mod acquisition;
pub mod benchmark;
pub mod config;
pub mod error;
pub mod exec;
pub mod gp;
pub mod inference;
pub mod linalg;
pub mod monotonic;
pub mod protocol;
pub mod quadrature;
pub mod rng;
pub mod sobol;
pub mod strategy;
pub mod testfuns;

pub use error::{Error, Result};

//! Experiment driver for the `adafish` optimizer: datasets, training runs
//! with convergence diagnostics, multi-seed comparisons, self-check suites
//! and SVG plots.

pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod plot;
pub mod train;
pub mod verify;

pub use error::{HarnessError, Result};

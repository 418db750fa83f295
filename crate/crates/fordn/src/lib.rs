//! File formats, the experiment driver and the command-line interface for
//! guided fiber orientation reconstruction. The numerics live in
//! `fordn_core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod parallel;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

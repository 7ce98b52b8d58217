//! Command-line harness: simulate designs, fit curves, run benchmark sweeps
//! and first-stage diagnostics.

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod engine;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult, Stage};

//! Command-line harness for the separation experiments: source generation,
//! mixing, training, derivative checks, figure data and stability tables.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod signal_io;

pub use cli::{run, Cli};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

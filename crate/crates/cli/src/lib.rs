//! Command-line driver: dataset generation, training, rendering, evaluation,
//! ablations and gradient checks.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use commands::{execute, Cli, Command};
pub use config::{Precision, RunConfig};
pub use error::{CliError, CliResult};

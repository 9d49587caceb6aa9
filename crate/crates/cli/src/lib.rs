//! Command-line driver: drafter training, decode benchmarks, losslessness
//! checks and the K sweep, configured by a sectioned `key = value` file.

pub mod commands;
pub mod config;
mod error;
pub mod report;
pub mod setup;

pub use commands::{cmd_ablate_k, cmd_bench, cmd_lossless, cmd_train};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

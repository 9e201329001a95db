//! Command-line front end: configuration, output files and subcommands.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{CliError, Outcome};
pub use config::{load_config, ConfigError, RunConfig};

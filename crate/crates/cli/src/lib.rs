//! Command-line front end: configuration parsing and subcommand pipelines.

pub mod commands;
pub mod config;

pub use commands::{run, CliError, Outcome, RunOptions, Subcommand};
pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};

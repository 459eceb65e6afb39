//! Command-line front end for the PAI-Conv library.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli, Command};
pub use config::{DataConfig, DataSource, RunConfig};
pub use error::CliError;

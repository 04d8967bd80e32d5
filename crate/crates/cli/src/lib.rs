//! Command-line front end: configuration layering, atomic outputs with a
//! run manifest, and one subcommand per workflow.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};

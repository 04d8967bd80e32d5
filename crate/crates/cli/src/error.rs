//! Error classes and their process exit codes.

use pmp_core::PmpError;
use thiserror::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or an output location that cannot be written.
    #[error("usage: {0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Input {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] PmpError),
}

impl CliError {
    /// `2` usage, `3` data or compatibility, `4` numeric or internal failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Output { .. } => EXIT_USAGE,
            CliError::Input { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                PmpError::Config(_) | PmpError::Argument(_) => EXIT_USAGE,
                PmpError::Data(_)
                | PmpError::Compatibility(_)
                | PmpError::Format(_)
                | PmpError::Io(_)
                | PmpError::Training(_) => EXIT_DATA,
                PmpError::Numeric(_) | PmpError::Dimension { .. } | PmpError::State(_) | PmpError::Analysis(_) => {
                    EXIT_NUMERIC
                }
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

use std::path::PathBuf;

use thiserror::Error;

/// Exit status for bad arguments, configs, layouts and I/O.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for numerical failures during a computation.
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] sift_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Core(e) => match e {
                sift_core::Error::Numerical(_) | sift_core::Error::Degenerate(_) => EXIT_NUMERICAL,
                _ => EXIT_USAGE,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

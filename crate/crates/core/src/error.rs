use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent arguments: shape mismatches, non-finite data,
    /// violated preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The operation is undefined for this input (zero matrix, rank-deficient
    /// basis, all-zero spectrum).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefixes the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::InvalidInput(m) => Error::InvalidInput(format!("{ctx}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{ctx}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
            Error::Format { path, message } => Error::Format {
                path,
                message: format!("{ctx}: {message}"),
            },
            io @ Error::Io { .. } => io,
        }
    }

    /// True for failures that stem from the numerics rather than the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

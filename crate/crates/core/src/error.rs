//! Crate-wide error type.
//!
//! Errors split along the boundaries the CLI cares about: input problems
//! (bad arguments, malformed files, shape mismatches) exit with code 1,
//! numerical failures (non-finite values mid-computation) exit with code 2.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or axis mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument, configuration, or data.
    #[error("input error: {0}")]
    Input(String),

    /// Mathematically degenerate input, e.g. a zero-norm vector.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Structured file does not parse; carries the offending line.
    #[error("format error in {path} at line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 for input-class errors, 2 for numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or flag value.
    #[error("configuration error: {0}")]
    Config(String),
    /// NaN/inf in a loss or gradient, or a numerically degenerate input.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("environment error: {0}")]
    Env(String),
    #[error("shape error: {0}")]
    Shape(#[from] AutodiffError),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Acceptance(_) => 4,
            Error::Policy(_) | Error::Shape(_) => 5,
            Error::Env(_) => 6,
            Error::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

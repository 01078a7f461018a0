use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty observation: {0}")]
    EmptyObservation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 input/parse, 2 integrity, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Integrity(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

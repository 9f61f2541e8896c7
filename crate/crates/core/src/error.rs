use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical instability: {0}")]
    Numerical(String),

    #[error("component placement failed: {0}")]
    Placement(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-parsable category used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Structure(_) => "structure",
            Error::Contract(_) => "contract",
            Error::Numerical(_) => "numerical",
            Error::Placement(_) => "placement",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Version(_) => "version",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } | Error::Json(_) | Error::Version(_) => 4,
            Error::Numerical(_) => 5,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

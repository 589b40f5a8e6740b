use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI header: {0}")]
    Header(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("payload too short: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid label map: {0}")]
    Labels(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Training or metric computation produced NaN/inf.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

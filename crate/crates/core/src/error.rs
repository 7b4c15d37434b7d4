use std::path::PathBuf;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented range.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller violated a shape or ordering contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A non-finite value appeared where finite input is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A data row could not be parsed.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    /// The CSV header does not match the requested schema.
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Schema(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

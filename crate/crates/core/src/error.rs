use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Every variant maps to a stable machine-readable category (see
/// [`Error::category`]) that the CLI prints and turns into an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image encoding error: {0}")]
    Image(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable, single-word category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "format-magic",
            Error::Version { .. } => "format-version",
            Error::Truncated { .. } => "format-truncated",
            Error::NonFinite { .. } => "non-finite-sample",
            Error::Shape(_) => "shape",
            Error::Param(_) => "parameter",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::NonFiniteGradient { .. } => "non-finite-gradient",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Usage(_) => "usage",
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } => 3,
            Error::BadMagic { .. } => 4,
            Error::Version { .. } => 5,
            Error::Truncated { .. } => 6,
            Error::NonFinite { .. } => 7,
            Error::Shape(_) => 8,
            Error::Param(_) => 9,
            Error::Config(_) => 10,
            Error::NonFiniteLoss { .. } => 11,
            Error::NonFiniteGradient { .. } => 12,
            Error::Json(_) => 13,
            Error::Image(_) => 14,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ComqError>;

#[derive(Debug, Error)]
pub enum ComqError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The weight matrix is identically zero; there is no scale to fit.
    #[error("degenerate layer: all weights are zero")]
    DegenerateLayer,

    #[error("oracle search space too large: {size} candidates exceeds limit {limit}")]
    SearchTooLarge { size: u128, limit: u128 },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ComqError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ComqError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, manifest, shapes)
    /// rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ComqError::InvalidConfig(_) | ComqError::Shape(_) | ComqError::Manifest(_)
        )
    }
}

/// Errors decoding a tensor file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"COMQTNSR\"")]
    BadMagic([u8; 8]),

    #[error("unsupported version {0}, expected 1")]
    BadVersion(u32),

    #[error("unknown dtype code {0}")]
    BadDtype(u8),

    #[error("truncated header: need {needed} bytes, have {available}")]
    TruncatedHeader { needed: usize, available: usize },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },

    #[error("dimension product overflows")]
    DimOverflow,

    #[error("expected {expected}, found {found}")]
    UnexpectedTensor { expected: String, found: String },
}

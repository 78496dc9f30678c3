use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation was called with an encoding it does not accept.
    #[error("encoding contract violated: expected {expected}, found {found}")]
    Encoding {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid degradation spec: {0}")]
    InvalidSpec(String),

    #[error("singular matrix {matrix:?} (|det| = {det:.3e})")]
    SingularMatrix { matrix: [f64; 9], det: f64 },

    #[error("token sequence error at position {position}: {message}")]
    Token { position: usize, message: String },

    #[error("estimation ambiguous: {0}")]
    Ambiguous(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("restoration failed: {0}")]
    Restore(String),

    #[error("malformed document: {0}")]
    Document(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

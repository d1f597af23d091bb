use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlvmError {
    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),
    #[error("encoder `{0}` is already registered")]
    DuplicateEncoder(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid concept name `{0}` (expected ⟨[a-z0-9_]+⟩)")]
    InvalidConceptName(String),
    #[error("concept `{0}` is already registered")]
    DuplicateConcept(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("unknown template id {0}")]
    UnknownTemplate(String),
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("sequence of {len} positions exceeds context limit {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty stratum: {0}")]
    EmptyStratum(String),
    #[error("non-finite loss at step {step}; state dumped to {dump:?}")]
    NonFiniteLoss { step: usize, dump: Option<PathBuf> },
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("endpoint error: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl PlvmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = PlvmError> = std::result::Result<T, E>;

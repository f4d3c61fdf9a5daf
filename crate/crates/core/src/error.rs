use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel count {channels} is not divisible by {heads} heads")]
    InvalidHeads { channels: usize, heads: usize },
    #[error("non-finite gradient at coordinate {0}")]
    NonFiniteGradient(usize),
    #[error("category {category} has {got} features, queue needs {needed}")]
    InsufficientFeatures { category: usize, got: usize, needed: usize },
    #[error("queue not ready: {0}")]
    QueueNotReady(String),
    #[error("unknown category {0}")]
    UnknownCategory(usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("expected exactly {expected} points, got {got}")]
    WrongPointCount { expected: usize, got: usize },
    #[error("category {0} has no samples")]
    EmptyCategory(usize),
    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated array {path}: expected {expected} bytes, found {found}")]
    TruncatedArray { path: PathBuf, expected: usize, found: usize },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("tracklet {tracklet}: manifest declares {expected} floats but payload holds {found}")]
    DimensionMismatch {
        tracklet: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate tracklet id {0}")]
    DuplicateTracklet(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in encoder stage `{stage}`")]
    NumericFailure { stage: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("positive set references a missing prototype: {0}")]
    StalePositive(String),

    #[error("ground-truth identities are required but absent")]
    MissingLabels,

    #[error("query identity {0} does not appear in the gallery")]
    QueryIdentityAbsent(u32),

    #[error("not enough {0} pairs to sample from")]
    NotEnoughPairs(&'static str),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        detail: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

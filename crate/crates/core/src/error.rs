use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: field `{field}`: {reason}")]
    MalformedRecord { line: usize, field: String, reason: String },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("line {0}: record carries both `image_features` and `image_pixels`")]
    MixedImageRepresentation(usize),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("segment set is empty after filtering")]
    EmptySegmentSet,

    #[error("image of {height}x{width} is not divisible by patch size {patch}")]
    NonDivisibleImage { height: usize, width: usize, patch: usize },

    #[error("token sequence has no terminal EOS token")]
    MissingEos,

    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),

    #[error("batch of {0} is too small; at least 2 pairs are required")]
    BatchTooSmall(usize),

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("need at least {needed} source pairs, got {got}")]
    InsufficientSources { needed: usize, got: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("all rows are identical; variance is zero")]
    DegenerateVariance,

    #[error("k = {k} exceeds the number of points ({points})")]
    TooFewPoints { k: usize, points: usize },

    #[error("loss diverged at {context}: {value}")]
    DivergedLoss { context: String, value: f64 },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown command `{0}`")]
    UnknownCommand(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

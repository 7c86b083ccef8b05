use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PruneError>;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("bad magic: expected \"PRUNEKT1\", found {found:?}")]
    MagicMismatch { found: Vec<u8> },

    #[error("shape mismatch in `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("truncated payload for `{name}`: needs bytes {start}..{end}, payload has {available}")]
    TruncatedPayload {
        name: String,
        start: usize,
        end: usize,
        available: usize,
    },

    #[error("invariant violated for `{name}`: {detail}")]
    InvariantViolation { name: String, detail: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("statistics are empty (n = 0)")]
    EmptyStats,

    #[error("insufficient samples: n = {n}, need at least {required}")]
    InsufficientSamples { n: u64, required: u64 },

    #[error("Gram matrix is not positive definite after damping (pivot {pivot} = {value:e})")]
    SingularGram { pivot: usize, value: f64 },

    #[error("input dimension {rows} is not divisible by group size {group}")]
    IndivisibleGroup { rows: usize, group: usize },

    #[error("invalid sparsity ratio {0}: must lie in [0, 1]")]
    InvalidRatio(f64),

    #[error("invalid N:M pattern {n}:{m}: need 0 < n < m")]
    InvalidPattern { n: usize, m: usize },

    #[error("no calibration data for layer `{0}`")]
    MissingCalibration(String),

    #[error("instance too large for brute force: {0}")]
    InstanceTooLarge(String),

    #[error("holdout fraction {0} outside [0, 0.5]")]
    InvalidHoldout(f64),

    #[error("unknown {kind} `{value}`")]
    Parse { kind: &'static str, value: String },
}

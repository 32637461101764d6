use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("all task vectors are zero; merging coefficients are undefined")]
    AllZeroTaskVectors,

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("unsupported tensor rank {0} (expected 1 or 2)")]
    UnsupportedRank(usize),

    #[error("imaginary residue {residue:e} exceeds tolerance {tolerance:e}")]
    ImaginaryResidue { residue: f64, tolerance: f64 },

    #[error("bundle checksum {bundle:016x} does not match backbone checksum {backbone:016x}")]
    ChecksumMismatch { bundle: u64, backbone: u64 },

    #[error("index {index} out of bounds for tensor `{name}` with {len} elements")]
    IndexOutOfBounds {
        name: String,
        index: u64,
        len: usize,
    },

    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

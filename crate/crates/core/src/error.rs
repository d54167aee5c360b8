//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by geometry, encoding, autodiff, model, data and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("quaternion norm {norm} deviates from 1 by more than {tol}")]
    NonUnitQuaternion { norm: f64, tol: f64 },

    #[error("sample count {requested} out of range for cloud of {available} points")]
    SampleCountOutOfRange { requested: usize, available: usize },

    #[error("{context}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("part count {n_parts} exceeds maximum {max_parts}")]
    TooManyParts { n_parts: usize, max_parts: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("op {op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("op {op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("softmax lane fully masked")]
    AllMasked,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cost matrix invalid: {0}")]
    InvalidCostMatrix(String),

    #[error("no parts to encode")]
    NoParts,

    #[error("encoder memory is empty")]
    EmptyMemory,

    #[error("file format: bad magic")]
    BadMagic,

    #[error("file format: unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file format: truncated ({0})")]
    Truncated(String),

    #[error("file format: checksum mismatch in record {record}")]
    ChecksumMismatch { record: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("split {0:?} selects no samples")]
    EmptySplit(String),

    #[error("model has no decoder parameters (run an in-process fine-tune first)")]
    MissingDecoder,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

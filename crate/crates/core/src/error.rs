use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Crate-wide error type above the tensor layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("length: sequence of {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}:{line}: {msg}")]
    Data { path: PathBuf, line: usize, msg: String },
    #[error("training: {0}")]
    Train(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Contract(String),
}

/// Binary file-format failures, one variant per distinct condition.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u8, found: u8 },
    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("dimension overflow: {s} x {d} elements exceeds the format limit")]
    DimensionOverflow { s: u64, d: u64 },
    #[error("tensor {name}: stored shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not compose for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (label, placement, ...) is outside its valid range.
    #[error("index {index} out of range (len {len}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// A configuration value is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An interval invariant (lower <= upper, finiteness) was violated.
    #[error("interval invariant violated: {0}")]
    Invariant(String),

    /// Non-finite values appeared during propagation or training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The autodiff tape was used out of order.
    #[error("autodiff state error: {0}")]
    TapeState(String),

    /// A file did not match the expected on-disk format.
    #[error("format error in {path}: {detail} (at byte offset {offset})")]
    Format {
        path: String,
        detail: String,
        offset: u64,
    },

    /// A checkpoint's payload disagrees with its own descriptor.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

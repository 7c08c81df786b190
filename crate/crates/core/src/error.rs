//! Crate-wide error type.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor operations, the network, file formats, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: graph already consumed by a previous backward pass")]
    BackwardConsumed,

    #[error("{op}: variable does not belong to this graph (detached or wrong graph)")]
    DetachedGraph { op: &'static str },

    #[error("global attention refuses {tokens} tokens (cap {cap}); use window or spectral attention")]
    TokenCapExceeded { tokens: usize, cap: usize },

    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("non-finite loss at step {step}; training aborted, last good checkpoint kept")]
    NonFiniteLoss { step: u64 },

    #[error("cosine schedule: step {step} exceeds total {total}")]
    ScheduleOverrun { step: u64, total: u64 },

    #[error("ensemble weights must sum to 1 (got {sum}) and be non-negative")]
    BadEnsembleWeights { sum: f64 },

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

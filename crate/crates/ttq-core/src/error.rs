//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, TtqError>;

/// Errors emitted by tensor, quantization, and file-format operations.
#[derive(Debug, Error)]
pub enum TtqError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("tensor size {size} is not divisible by groupsize {groupsize}")]
    GroupDivisibility { size: usize, groupsize: usize },

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: u32, bits: u8 },

    #[error("packed code buffer has {got} bytes, expected {expected}")]
    PackLength { expected: usize, got: usize },

    #[error("scale entries must be strictly positive (entry {index} = {value})")]
    NonPositiveScale { index: usize, value: f64 },

    #[error("rank {rank} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange {
        rank: usize,
        rows: usize,
        cols: usize,
    },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal mass {off:.3e})")]
    SvdNoConvergence { sweeps: usize, off: f64 },

    #[error("iteration diverged: loss {loss:.3e} exceeds {factor} x initial {initial:.3e}")]
    Diverged { loss: f64, initial: f64, factor: f64 },

    #[error("enumeration budget exceeded: {bits} code bits > {budget}")]
    BudgetExceeded { bits: u32, budget: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

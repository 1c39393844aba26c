//! Error type shared by the quantizer and the kernels.

use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Quantization input contained NaN or an infinity.
    NonFiniteInput { index: usize },
    /// Row length is not a multiple of the 32-element group size.
    BadRowLength { len: usize },
    /// Row or buffer was empty where at least one element is required.
    EmptyInput,
    /// Two buffers that must have equal lengths did not.
    LengthMismatch { expected: usize, got: usize },
    /// Dot product operands carry different block counts.
    BlockCountMismatch { lhs: usize, rhs: usize },
    /// Matrix / vector shapes do not compose.
    DimensionMismatch { expected: usize, got: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFiniteInput { index } => {
                write!(f, "non-finite value at index {index} cannot be quantized")
            }
            Error::BadRowLength { len } => {
                write!(f, "row length {len} is not a multiple of 32")
            }
            Error::EmptyInput => write!(f, "input must contain at least one element"),
            Error::LengthMismatch { expected, got } => {
                write!(f, "buffer length mismatch: expected {expected}, got {got}")
            }
            Error::BlockCountMismatch { lhs, rhs } => {
                write!(f, "block count mismatch: {lhs} vs {rhs}")
            }
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl core::error::Error for Error {}

//! Error type shared by every module in the crate.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, transforms, kernels, and training.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes cannot be combined by the requested operation.
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// Element counts disagree (reshape targets, data buffers).
    SizeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Hadamard order outside the supported range.
    OrderOutOfRange { k: u32, max: u32 },
    /// Quantization scale must be strictly positive.
    NonPositiveScale { scale: f64 },
    /// Quantization bit-width outside [2, 8].
    InvalidBits { bits: u8 },
    /// LoRA rank outside [1, min(c_i, c_o)/2].
    InvalidRank { rank: usize, max: usize },
    /// Timestep index outside the schedule or scale table.
    TimestepOutOfRange { t: usize, len: usize },
    /// A non-finite value appeared where finite reals are required.
    NonFinite { context: &'static str },
    /// An input that must carry data was empty.
    EmptyInput(&'static str),
    /// Integer accumulator overflow in a quantized kernel. Wraparound is
    /// never silently accepted.
    IntegerOverflow { context: &'static str },
    /// Noise-schedule parameters outside their valid ranges.
    InvalidSchedule(String),
    /// Configuration value rejected by validation.
    InvalidConfig(String),
    /// Training loss went non-finite; carries the first offending layer.
    TrainingDiverged { layer: String },
    /// Tensor file did not start with the expected magic bytes.
    BadMagic,
    /// Tensor file version this reader does not understand.
    UnsupportedVersion(u8),
    /// Tensor file ended before the declared payload.
    Truncated,
    /// Tensor file carries bytes past the declared payload.
    TrailingBytes,
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "{context}: shape mismatch, expected {expected:?}, got {got:?}"
            ),
            Error::SizeMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "{context}: size mismatch, expected {expected} elements, got {got}"
            ),
            Error::OrderOutOfRange { k, max } => {
                write!(f, "Hadamard order k={k} outside supported range 0..={max}")
            }
            Error::NonPositiveScale { scale } => {
                write!(f, "quantization scale must be positive, got {scale}")
            }
            Error::InvalidBits { bits } => {
                write!(f, "bit-width must lie in [2, 8], got {bits}")
            }
            Error::InvalidRank { rank, max } => {
                write!(f, "LoRA rank {rank} outside permitted range 1..={max}")
            }
            Error::TimestepOutOfRange { t, len } => {
                write!(f, "timestep {t} out of range for table of length {len}")
            }
            Error::NonFinite { context } => {
                write!(f, "{context}: non-finite value where finite reals required")
            }
            Error::EmptyInput(what) => write!(f, "{what} must not be empty"),
            Error::IntegerOverflow { context } => {
                write!(f, "{context}: integer accumulator overflow")
            }
            Error::InvalidSchedule(msg) => write!(f, "invalid noise schedule: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::TrainingDiverged { layer } => {
                write!(f, "training diverged: first non-finite output at layer {layer}")
            }
            Error::BadMagic => write!(f, "tensor file: bad magic bytes"),
            Error::UnsupportedVersion(v) => write!(f, "tensor file: unsupported version {v}"),
            Error::Truncated => write!(f, "tensor file: truncated payload"),
            Error::TrailingBytes => write!(f, "tensor file: trailing bytes after payload"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

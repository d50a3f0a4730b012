//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shape mismatch or invalid dimension arithmetic.
    Shape(String),
    /// Audio signal had no samples.
    EmptyAudio,
    /// Sample rate other than 16 kHz.
    BadSampleRate(u32),
    /// Time dimension shorter than the convolution kernel.
    SequenceTooShort { len: usize, kernel: usize },
    /// MFCC sequence longer than the 8192-frame cap.
    SequenceTooLong { frames: usize, cap: usize },
    /// Vector norm below the normalization threshold.
    DegenerateNorm,
    /// Contrastive loss needs at least two pairs.
    BatchTooSmall(usize),
    /// `backward` called on a non-scalar node.
    NonScalarRoot { numel: usize },
    /// Generic invalid-argument condition.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::EmptyAudio => write!(f, "empty audio"),
            Error::BadSampleRate(sr) => write!(f, "unsupported sample rate {sr} (expected 16000)"),
            Error::SequenceTooShort { len, kernel } => {
                write!(f, "sequence shorter than kernel ({len} < {kernel})")
            }
            Error::SequenceTooLong { frames, cap } => {
                write!(f, "sequence of {frames} frames exceeds the {cap}-frame cap")
            }
            Error::DegenerateNorm => write!(f, "degenerate norm"),
            Error::BatchTooSmall(b) => {
                write!(f, "batch too small for contrastive loss (got {b}, need >= 2)")
            }
            Error::NonScalarRoot { numel } => {
                write!(f, "backward requires a scalar root, got {numel} elements")
            }
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}

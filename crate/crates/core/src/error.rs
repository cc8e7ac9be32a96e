use alloc::string::String;

/// Errors from the math layer.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A noise level that must be strictly positive was zero or negative.
    NonPositiveSigma { sigma: f64 },
    /// A noise level outside the range an operation supports.
    SigmaOutOfRange { sigma: f64, max: f64 },
    /// Tensor shape does not match what the operation requires.
    ShapeMismatch { what: &'static str },
    /// A bad argument (range, ordering, emptiness), with context.
    InvalidArgument(String),
    /// Non-finite value encountered where finite math is required.
    NonFinite { what: &'static str },
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::NonPositiveSigma { sigma } => {
                write!(f, "noise level must be positive, got {sigma}")
            }
            CoreError::SigmaOutOfRange { sigma, max } => {
                write!(f, "noise level {sigma} outside supported range (0, {max}]")
            }
            CoreError::ShapeMismatch { what } => write!(f, "shape mismatch: {what}"),
            CoreError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::NonFinite { what } => write!(f, "non-finite value in {what}"),
        }
    }
}

impl core::error::Error for CoreError {}

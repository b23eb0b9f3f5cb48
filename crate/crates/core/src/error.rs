use alloc::string::String;
use core::fmt;

/// Errors produced by the core numerical routines.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor/cube extents do not line up for the requested operation.
    /// The message names the offending dimension.
    ShapeMismatch(String),
    /// A configuration or argument value is out of its valid range.
    InvalidArgument(String),
    /// An iterative solver failed to behave as contracted (e.g. the
    /// PGD-TV objective increased); carries the iteration index.
    Divergence { iteration: usize, message: String },
    /// A value became NaN or infinite where finiteness is required.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CoreError::Divergence { iteration, message } => {
                write!(f, "divergence at iteration {iteration}: {message}")
            }
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

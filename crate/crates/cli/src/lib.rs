//! Training/evaluation harness, file formats, and configuration for the
//! pgdudst command-line tool. The numerical core lives in `pgdudst-core`;
//! this crate owns everything that touches the filesystem.

use std::fmt;

use pgdudst_core::CoreError;

pub mod config;
pub mod formats;
pub mod harness;

/// Process-level failure, carrying the exit code contract:
/// usage errors exit 1, data errors 2, numerical failures 3.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage error: {m}"),
            AppError::Data(m) => write!(f, "data error: {m}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> AppError {
        match e {
            CoreError::NonFinite(_) | CoreError::Divergence { .. } => {
                AppError::Numerical(e.to_string())
            }
            CoreError::ShapeMismatch(_) | CoreError::InvalidArgument(_) => {
                AppError::Data(e.to_string())
            }
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;

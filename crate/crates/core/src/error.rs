use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map one-to-one onto the CLI exit codes (see [`ErftError::exit_code`]).
#[derive(Debug, Error)]
pub enum ErftError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl ErftError {
    /// Process exit code for this error class: 2 = config, 3 = geometry, 4 = I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ErftError::Config(_) => 2,
            ErftError::Geometry(_) => 3,
            ErftError::Io(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = ErftError> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::ErftError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;

use std::io;

use thiserror::Error;

/// Every failure the pipeline can report. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum GpsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl GpsError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        GpsError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data/format, 4 numeric, 5 integrity.
    pub fn exit_code(&self) -> u8 {
        match self {
            GpsError::Config(_) => 2,
            GpsError::Dimension(_)
            | GpsError::Input(_)
            | GpsError::Contract(_)
            | GpsError::Format(_)
            | GpsError::Compatibility(_)
            | GpsError::Io { .. } => 3,
            GpsError::Numeric(_) => 4,
            GpsError::Integrity(_) => 5,
            GpsError::State(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GpsError>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("payload length mismatch: header expects {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("label value {value} at voxel {index} outside 0..=5")]
    InvalidLabel { index: usize, value: f32 },

    #[error("value {value} at index {index} is not a valid {what}")]
    InvalidValue {
        index: usize,
        value: f64,
        what: &'static str,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid connectivity {0}, expected 6, 18 or 26")]
    InvalidConnectivity(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("phantom placement failed: {0}")]
    Placement(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than by
    /// the data being processed.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::InvalidConnectivity(_) | Error::InvalidArgument(_)
        )
    }
}

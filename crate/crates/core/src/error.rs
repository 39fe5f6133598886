use std::path::PathBuf;

use thiserror::Error;

use crate::clipping::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("invalid bound: {0}")]
    InvalidBound(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clip spec has {} violation(s); first: {}", .0.len(), .0[0])]
    InvalidClipSpec(Vec<Violation>),

    #[error("unsupported dimension {dim}: {context}")]
    UnsupportedDimension { dim: usize, context: &'static str },

    #[error("instance too large for brute-force oracle: {0}")]
    InstanceTooLarge(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: no rows")]
    NoRows { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidEpsilon(epsilon))
    }
}

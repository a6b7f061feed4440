use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no object found: {0}")]
    NoObject(String),

    #[error("embedding backend error: {0}")]
    Backend(String),

    #[error("checkpoint error (format version {found_version:?}, expected {expected_version}): {message}")]
    Checkpoint {
        message: String,
        found_version: Option<u32>,
        expected_version: u32,
    },

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("pretraining did not converge: PSNR {psnr:.2} dB < {target:.2} dB after {iterations} iterations")]
    NotConverged {
        psnr: f64,
        target: f64,
        iterations: usize,
    },

    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("{path} not found: {hint}")]
    Missing { path: PathBuf, hint: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

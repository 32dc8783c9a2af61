//! Error taxonomy for the whole pipeline.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by what
//! the caller can do about them: dimension and configuration errors are
//! programming/config mistakes, integrity errors mean a checkpoint file is
//! damaged, training errors abort a run with a diagnosis.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Reading or writing a file failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file that should contain an image could not be decoded.
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: String, reason: String },

    /// Tensor shapes or sizes violate a documented constraint.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is invalid (unknown layer, bad head count, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared; names the loss component (training adds
    /// the step number when it propagates this).
    #[error("training error: non-finite value in {0}")]
    NonFinite(String),

    /// A checkpoint file is corrupt, truncated, or fails its digest.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// A checkpoint was built by an incompatible model configuration.
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    /// Error propagated from the tensor backend.
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Convenience constructor for I/O errors with path context.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for dimension errors.
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Convenience constructor for configuration errors.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

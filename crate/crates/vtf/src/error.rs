//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had a different shape than the operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An operation's numeric precondition was violated (e.g. spatial dims too
    /// small for padding, non-positive stride).
    #[error("invalid argument in {context}: {message}")]
    InvalidArgument {
        context: &'static str,
        message: String,
    },

    /// A value left its documented range (byte-range images, temperature
    /// fields, probabilities).
    #[error("value out of range in {context}: {message}")]
    OutOfRange {
        context: &'static str,
        message: String,
    },

    /// A loss or gradient became NaN/Inf during training.
    #[error("non-finite value in {context}: {message}")]
    NonFinite {
        context: &'static str,
        message: String,
    },

    /// An iterative numeric routine failed to converge.
    #[error("{context} did not converge after {iterations} iterations (residual {residual})")]
    NoConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// Configuration file problems: unknown keys, bad values, missing files.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset manifest problems: missing files, duplicate ids, bad splits.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Checkpoint serialization / deserialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

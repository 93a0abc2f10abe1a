//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two tensors (or a tensor and an expected shape) do not line up.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation was called in the wrong order (e.g. optimizer step
    /// before backward, backward on a consumed tape).
    #[error("state error: {0}")]
    State(String),

    /// A binary or CSV input failed to parse; `offset` is the byte offset
    /// at which decoding stopped.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// Prediction/ground-truth alignment failed; every offending id is listed.
    #[error("sequence id mismatch: {0:?}")]
    IdMismatch(Vec<String>),

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

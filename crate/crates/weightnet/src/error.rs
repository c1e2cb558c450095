//! Error types shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("dimension error in {op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape violates a geometric precondition (stride/pad/kernel fit,
    /// divisibility by groups, non-positive extent, ...).
    #[error("dimension error in {op}: {msg} (shape {shape:?})")]
    BadGeometry {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    /// Invalid layer or run configuration; the message names the violated
    /// constraint.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (non-scalar loss, analyzing a static layer, too few samples).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training aborted because a tensor went non-finite.
    #[error("numeric abort at step {step}: tensor '{tensor}' is not finite")]
    NonFinite { tensor: String, step: usize },

    #[error("i/o error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A binary or JSON payload does not match its declared format.
    #[error("format error in '{path}': {msg}")]
    Format { path: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

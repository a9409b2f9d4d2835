use std::path::PathBuf;

use crate::tensor::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite {what} in parameter {name}")]
    NonFiniteParam { what: &'static str, name: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("reduction over an empty axis of shape {0}")]
    EmptyAxis(Shape),

    #[error("scan parameters vary over the sequence; convolutional form requires a time-invariant system")]
    NotTimeInvariant,

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

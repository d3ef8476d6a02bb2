use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VineError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("empty class pool for split {0}")]
    EmptySplit(&'static str),

    #[error("non-finite gradient at parameter {path}")]
    NonFinite { path: String },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VineError>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> VineError {
    VineError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

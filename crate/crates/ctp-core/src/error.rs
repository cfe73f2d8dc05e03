//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("missing {0}")]
    MissingFile(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("unknown edge type {etype} (edge-type count is {count})")]
    UnknownEdgeType { etype: usize, count: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("training failed at step {step}: {msg}")]
    TrainStep { step: usize, msg: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

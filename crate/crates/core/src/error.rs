use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("layer {layer}: shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        layer: usize,
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("layer {layer}: non-finite value in {what}")]
    NonFinite { layer: usize, what: &'static str },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("dataset row {row}, column {column}: {message}")]
    Dataset {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset header mismatch: expected {expected:?}, got {actual:?}")]
    Header {
        expected: Vec<String>,
        actual: Vec<String>,
    },

    #[error("failed to spawn oracle process `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("oracle protocol violation: {0}")]
    Protocol(String),

    #[error("oracle did not answer within {0:?}")]
    Timeout(std::time::Duration),

    #[error("no similar instance receives a different label")]
    NoCounterpart,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

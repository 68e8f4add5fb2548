use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left} and {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: expected {expected} values for shape {shape}, got {actual}")]
    DataLength {
        op: &'static str,
        shape: Shape,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no gradient recorded for tensor #{0}")]
    AbsentGradient(usize),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(
        "layer {layer}: axis length {requested} exceeds the {available} positions its global-span table was built for"
    )]
    SpanOverflow {
        layer: String,
        requested: usize,
        available: usize,
    },

    #[error("oracle size guard: {0}")]
    Size(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("training diverged at step {step} (last good checkpoint: {})", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence { step: u64, last_good: Option<PathBuf> },

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

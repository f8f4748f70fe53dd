//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors. Carries both offending shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced NaN or Inf from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A contract violation that is not a plain shape error.
    #[error("contract violation: {0}")]
    Contract(String),

    /// backward() called on a graph that was already consumed.
    #[error("stale graph: backward() already ran; re-record the graph first")]
    StaleGraph,

    /// A row or vector with zero L2 norm reached a normalizing operation.
    #[error("zero-norm input to {op}: {detail}")]
    ZeroNorm { op: &'static str, detail: String },

    /// Class label or index outside the valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A channel set or channel id missing from the registry or bank.
    #[error("unknown channel set or channel: {0}")]
    UnknownChannel(String),

    /// Frontend asked to process an input it was not built for.
    #[error("strategy mismatch: {0}")]
    StrategyMismatch(String),

    /// Malformed dataset, metadata, or container file.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration failed validation at startup.
    #[error("config error: {0}")]
    Config(String),

    /// TPS or other linear system could not be solved.
    #[error("solver error: {0}")]
    Solver(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported filter width {0}: filter widths must be odd")]
    UnsupportedFilterWidth(usize),

    #[error("insufficient statistics: batch normalization needs at least 2 valid positions per channel, got {0}")]
    InsufficientStatistics(usize),

    #[error("invalid dropout rate {0}: must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("empty loss: the validity mask selects no positions")]
    EmptyLoss,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("malformed record {record} at position {position}: {message}")]
    MalformedRecord {
        record: usize,
        position: usize,
        message: String,
    },

    #[error("degenerate channel {0}: zero variance over training residues")]
    DegenerateChannel(usize),

    #[error("records are already normalized")]
    AlreadyNormalized,

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Divergence { iteration: u64, loss: f64 },

    #[error("undefined metric: no valid residues")]
    UndefinedMetric,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {what} at token {token}")]
    Numeric { what: &'static str, token: usize },

    #[error("token id {token} at position {position} is outside the vocabulary of {vocab}")]
    Input {
        position: usize,
        token: usize,
        vocab: usize,
    },

    #[error("invalid structure state: {0}")]
    State(String),

    #[error("MLP in block {block} has {available} channels, cannot remove {requested}")]
    Capacity {
        block: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid architecture: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

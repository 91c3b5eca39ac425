use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("top-k: k = {k} outside 1..={len}")]
    TopK { k: usize, len: usize },

    #[error("capacity r = {r} exceeds segment count V = {segments}")]
    Capacity { r: usize, segments: usize },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    MissingParameter(String),

    #[error("non-finite loss at step {step}: l_ntp = {l_ntp}, l_balance = {l_balance}")]
    NonFiniteLoss { step: u64, l_ntp: f64, l_balance: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

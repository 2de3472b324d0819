use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error in {op}: expected {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("image {height}x{width} cannot be split into {patch}x{patch} patches")]
    Patching {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("{tokens} tokens do not form a square grid divisible by {factor}")]
    Grid { tokens: usize, factor: usize },

    #[error("kernel materialized for length {kernel} applied to sequence of length {input}")]
    KernelLength { kernel: usize, input: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("epoch {epoch} outside schedule range 0..={total}")]
    Schedule { epoch: usize, total: usize },

    #[error("label {0} is not a binary class label")]
    Label(usize),

    #[error("gradient norm is not finite ({0})")]
    NonFiniteGradient(f64),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}, lr {lr}, grad norm {grad_norm}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("manifest schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax row {row} has every entry masked out")]
    DegenerateRow { row: usize },

    #[error("cross-entropy has no target positions left after ignoring padding")]
    EmptyLoss,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("report structure: {0}")]
    Structure(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("prediction/gold pairing: {pred} predictions vs {gold} gold label vectors")]
    Pairing { pred: usize, gold: usize },

    #[error("usage: {0}")]
    Usage(String),

    #[error("sequence of length {len} exceeds the model context of {max}")]
    Length { len: usize, max: usize },

    #[error("every token is blocked; nothing to sample")]
    AllBlocked,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(
        "{0}: run `pretrain` first and pass its checkpoint with --init (stage order: gen-data -> pretrain -> ppo-train)"
    )]
    StageOrder(String),

    #[error("PPO iteration {iter} diverged: mean |ratio - 1| = {mean_dev:.3}")]
    Divergence { iter: usize, mean_dev: f64 },

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

use thiserror::Error;

use crate::store::StoreError;
use crate::tensor::TensorError;
use crate::training::RunRecord;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("input does not match the model's input mode: {0}")]
    InputMode(String),
    #[error("unknown tensor name `{0}`")]
    UnknownTensor(String),
    #[error("checkpoint tensor set does not match config: {0}")]
    TensorSet(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("transfer of `{name}` failed: donor shape {donor:?} vs target {target:?}")]
    TransferShape {
        name: String,
        donor: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("transfer plan references missing donor `{0}`")]
    MissingDonor(String),
    #[error("invalid transfer plan: {0}")]
    InvalidPlan(String),
    #[error("relative improvement undefined: pretrained and random accuracies are both {0}")]
    UndefinedScore(f64),
    #[error("corpus too short: {tokens} tokens, need at least {needed}")]
    CorpusTooShort { tokens: usize, needed: usize },
    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: u64, reason: String },
    /// An aborted training run, with its record up to the failure.
    #[error("run aborted at step {step}: {reason}")]
    AbortedRun {
        step: u64,
        reason: String,
        record: Box<RunRecord>,
    },
    #[error("cannot aggregate records from different configurations: `{0}` vs `{1}`")]
    MixedConfigurations(String, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

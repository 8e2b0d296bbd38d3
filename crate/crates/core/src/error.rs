use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocab { id: TokenId, size: usize },
    #[error("sequence of length {len} exceeds context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("operation is undefined on an empty sequence")]
    EmptySequence,
    #[error("every token is masked out")]
    AllMasked,
    #[error("exact Shapley values limited to {max} tokens, got {len}")]
    TooLongForExact { len: usize, max: usize },
    #[error("all single-token outputs are equal; importances are unidentifiable")]
    ConstantModel,
    #[error("no reference token with a distinct value for token {0}")]
    NearDegenerate(TokenId),
    #[error("single-token values are too close to separate importances")]
    DegenerateValues,
    #[error("pair ratio {0} is outside (0, 1); oracle is not a SLALOM")]
    OutOfRange(f64),
    #[error("sequence of length {len} is too short, need more than {need}")]
    SequenceTooShort { len: usize, need: usize },
    #[error("training loss diverged ({0})")]
    DivergedLoss(f64),
    #[error("importance step failed: {0}")]
    InfeasibleSStep(String),
    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("oracle did not answer within {0} ms")]
    Timeout(u64),
    #[error("dimension {got} too small, need at least {min}")]
    DimTooSmall { got: usize, min: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("input is constant; rank correlation undefined")]
    DegenerateConstantInput,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

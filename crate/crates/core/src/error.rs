use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),

    #[error("expected a single-channel image, got {0} channels")]
    NotGrayscale(usize),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("{path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid difficulty weights: {0}")]
    InvalidWeights(String),

    #[error("line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sample {0} has no label")]
    MissingLabel(String),

    #[error("sample {0} has no difficulty source")]
    MissingDifficulty(String),

    #[error("grid has {combinations} combinations, above the cap of {cap}")]
    GridTooLarge { combinations: u128, cap: u128 },

    #[error("transition row for state {state} sums to {sum}")]
    NonStochastic { state: usize, sum: f64 },

    #[error("value iteration did not converge within {0} iterations")]
    NotConverged(usize),

    #[error("unknown strategy index {0}")]
    UnknownStrategy(usize),

    #[error("no strategies registered")]
    NoStrategies,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

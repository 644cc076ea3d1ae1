use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus too small: need at least {needed} tokens for {what}, have {available}")]
    CorpusTooSmall {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("pool exhausted: {remaining} tokens left, batch needs {needed}")]
    PoolExhausted { remaining: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("head dimension {0} is odd; rotary embedding needs pairs")]
    OddHeadDim(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),

    #[error("run diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("gradient contains non-finite values")]
    NonFiniteGradient,

    #[error("mixing coefficient {0} outside [0, 1]")]
    AlphaOutOfRange(f64),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),

    #[error("entropy {0} is negative")]
    NegativeEntropy(f64),

    #[error("entropy {entropy} outside [0, ln {vocab_size}]")]
    EntropyOutOfRange { entropy: f64, vocab_size: usize },

    #[error("bin `{0}` has no records")]
    EmptyBin(String),

    #[error("ratio undefined: {0}")]
    ZeroDenominator(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),

    #[error("unsupported format: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("file truncated: {0}")]
    Truncated(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

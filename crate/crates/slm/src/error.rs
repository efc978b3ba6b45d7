use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum SlmError {
    #[error("category index {index} out of range for K={k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("candidate set must contain at least one category")]
    EmptyCandidateSet,

    #[error("candidate set entries must be 0 or 1 (found {value})")]
    NonBinaryEntry { value: u8 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("vocabulary size K={k} is degenerate; K >= 2 required")]
    DegenerateVocabulary { k: usize },

    #[error("probability {value} outside [0,1]")]
    InvalidProbability { value: f64 },

    #[error("time {tau} outside [0,1]")]
    TimeOutOfRange { tau: f64 },

    #[error("grid step {j} outside [{lo}, {hi}]")]
    StepOutOfRange { j: usize, lo: usize, hi: usize },

    #[error("x0 support is not contained in x_t")]
    SupportViolation,

    #[error("predictor output support does not match the candidate set")]
    SupportMismatch,

    #[error("enumeration budget exceeded: needs {needed} states, budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("{0}")]
    InvalidInput(String),

    #[error("byte 0x{byte:02x} at offset {offset} is not in the alphabet")]
    OutOfAlphabet { byte: u8, offset: usize },

    #[error("checkpoint incompatible with config:\n{diff}")]
    CheckpointMismatch { diff: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SlmError>;

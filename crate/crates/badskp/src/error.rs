//! Crate-wide error type. Variants are named for the failure they signal,
//! not for the module that raises them, since several are shared (shape
//! mismatches, non-finite values, empty inputs).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("zero-magnitude vector in {0}")]
    ZeroVector(&'static str),

    #[error("sequence of length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("sequence too short: {context} needs at least {min} tokens, got {got}")]
    SequenceTooShort {
        context: &'static str,
        min: usize,
        got: usize,
    },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown token id {0}")]
    UnknownTokenId(usize),

    #[error("dangling edge `{src}` -[{relation}]-> `{dst}`: missing node `{missing}`")]
    DanglingEdge {
        src: String,
        relation: String,
        dst: String,
        missing: String,
    },

    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),

    #[error("invalid graph record: {0}")]
    InvalidGraph(String),

    #[error("budget exceeded: {context} allows {limit}, got {got}")]
    BudgetExceeded {
        context: &'static str,
        limit: usize,
        got: usize,
    },

    #[error("invalid poison plan: {0}")]
    InvalidPlan(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate statistical test: {0}")]
    DegenerateTest(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    /// Config validation failed; the report lists every violated invariant.
    #[error("invalid config:\n{0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// A cache or checkpoint was produced under a different config.
    #[error("config fingerprint mismatch for {0}")]
    ConfigMismatch(String),

    #[error("adaLN anchor not initialized; process frame 1 first")]
    AnchorUninitialized,

    #[error("group {group} conditioning is missing a token for slot {slot}")]
    MissingPriorGroup { group: usize, slot: usize },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

impl ModelError {
    pub fn precondition(msg: impl Into<String>) -> Self {
        ModelError::Precondition(msg.into())
    }

    pub fn shape(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        ModelError::ShapeMismatch {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

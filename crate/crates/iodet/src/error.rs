//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    /// A target label lies outside the class set of the group it was
    /// routed to; this always indicates a protocol or labeling bug.
    #[error("group {group} was given a target of class {class}, outside its class set")]
    TargetOutsideClassSet { group: usize, class: usize },

    #[error("incremental step {phase} requires a previous-phase model snapshot")]
    MissingOldModel { phase: usize },

    /// Training produced a non-finite loss; carries the failure site.
    #[error("non-finite loss at {context}")]
    NonFinite { context: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl DetError {
    /// Process exit code for the CLI: 1 config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            DetError::Config(_) => 1,
            DetError::NonFinite { .. } => 2,
            DetError::Io(_) | DetError::Json(_) | DetError::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Which of the two per-token training flags an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    Policy,
    Value,
}

impl std::fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainTarget::Policy => f.write_str("policy"),
            TrainTarget::Value => f.write_str("value"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("returns require finished trajectory")]
    UnfinishedTrajectory,

    #[error("double-training violation: {target} flag already set on step {step}")]
    DoubleTraining { target: TrainTarget, step: usize },

    #[error("step after terminal")]
    StepAfterTerminal,

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("diverged parameters")]
    DivergedParameters,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty window for active slot")]
    EmptyWindow,

    #[error("empty policy batch")]
    EmptyPolicyBatch,

    #[error("prompt stream exhausted")]
    PromptStreamExhausted,

    #[error("length source exhausted for slot {slot}")]
    LengthSourceExhausted { slot: usize },

    #[error("training diverged at window {window}{}", dump.as_ref().map(|p| format!(" (window dump: {})", p.display())).unwrap_or_default())]
    TrainingDiverged { window: u64, dump: Option<PathBuf> },

    #[error("malformed input at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

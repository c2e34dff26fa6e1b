use std::path::PathBuf;

use dst_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DstError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: unknown slot `{slot}`")]
    UnknownSlot { line: usize, slot: String },
    #[error("dialogue {dialogue}: {message}")]
    Validation { dialogue: String, message: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("config: {0}")]
    Config(String),
    #[error("input of {needed} tokens exceeds max_len {max_len} even without dialogue tokens")]
    StateBlockTooLong { needed: usize, max_len: usize },
    #[error("slot {slot} is not updated at turn {turn}")]
    NotUpdated { turn: usize, slot: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training diverged at epoch {epoch}, dialogue {dialogue}: non-finite loss")]
    Diverged { epoch: usize, dialogue: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DstError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DstError::Io { path: path.into(), source }
    }

    pub fn validation(dialogue: &str, message: impl Into<String>) -> Self {
        DstError::Validation { dialogue: dialogue.to_string(), message: message.into() }
    }

    /// Input/validation failures as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DstError::Json { .. }
                | DstError::UnknownSlot { .. }
                | DstError::Validation { .. }
                | DstError::Schema(_)
                | DstError::Config(_)
                | DstError::SchemaMismatch(_)
                | DstError::NotUpdated { .. }
                | DstError::StateBlockTooLong { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DstError>;

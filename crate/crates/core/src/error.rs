//! Crate-wide error type with stable machine-readable categories.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("format: {0}")]
    Format(String),

    /// A pipeline stage was invoked before the stage producing its inputs.
    #[error("missing prerequisite: run stage `{stage}` first ({detail})")]
    MissingPrerequisite { stage: String, detail: String },

    /// An input artifact was produced under a different configuration.
    #[error("config hash mismatch: {0}")]
    HashMismatch(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    /// Stable category slug used by the CLI error line and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::MissingPrerequisite { .. } => "missing-prerequisite",
            Error::HashMismatch(_) => "hash-mismatch",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Divergence(_) => "divergence",
        }
    }

    /// CLI exit code for this category (0 is reserved for success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Format(_) => 4,
            Error::MissingPrerequisite { .. } => 5,
            Error::HashMismatch(_) => 6,
            Error::Validation(_) => 7,
            Error::Shape(_) => 8,
            Error::Divergence(_) => 9,
        }
    }
}

//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatches, out-of-range values, empty inputs.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A prompt with the wrong token count or token length.
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    /// A token whose role or length does not match its slot.
    #[error("invalid token: {0}")]
    InvalidToken(String),

    /// Malformed record in a line-oriented file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Cosine similarity against a zero-norm vector.
    #[error("degenerate feature: zero norm, cosine undefined")]
    DegenerateFeature,

    /// Inference attempted without a credential token; no prediction is emitted.
    #[error("credential missing: inference halted")]
    CredentialMissing,

    /// No credential record exists for the requested domain.
    #[error("no credential issued for domain {0:?}")]
    CredentialNotFound(String),

    /// Credential store could not be read or written.
    #[error("credential store error: {0}")]
    Storage(String),

    /// Non-finite loss encountered during optimization.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// The paper-row fixture file is absent.
    #[error("fixture not found: {0}")]
    FixtureNotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

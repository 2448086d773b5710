use thiserror::Error;

use crate::vlm::ModelParams;

/// Errors produced by the core engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's domain (shape mismatch, empty input, bad count).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-supplied function broke its contract (e.g. a non-deterministic loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss. Carries the last parameters that were finite.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_finite: Box<ModelParams>,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

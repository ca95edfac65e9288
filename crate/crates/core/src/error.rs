//! Shared error type for the whole pipeline.

use thiserror::Error;

/// Errors surfaced by signal ops, corpus handling, autodiff, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },

    #[error("silent signal: {context} (power {power:.3e} below 1e-12)")]
    SilentSignal { context: &'static str, power: f64 },

    #[error("signal too short: got {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown emotion label {0:?}")]
    UnknownLabel(String),

    #[error("no compatible interferer for target {target_id:?}: {constraint}")]
    NoCompatibleInterferer { target_id: String, constraint: String },

    #[error("no eligible neutral enrollment utterance for speaker {speaker_id:?}")]
    NoEnrollment { speaker_id: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("non-finite {what} at step {step}; training aborted")]
    NonFinite { what: &'static str, step: u64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing stage-1 checkpoint: {0}")]
    StageOrder(String),

    #[error("audio file error: {0}")]
    Wav(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid window length {window} for signal of length {len}")]
    InvalidWindow { window: usize, len: usize },

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate resultant: feature vectors cancel out (|sum| = {0:e})")]
    DegenerateResultant(f64),

    #[error("degenerate fusion: batch mean opposes global mean (|sum| = {0:e})")]
    DegenerateFusion(f64),

    #[error("mean resultant length {0} outside [0, 1)")]
    Domain(f64),

    #[error("degenerate spectrum: total power {0:e} below threshold")]
    DegenerateSpectrum(f64),

    #[error("client {client} failed: {reason}")]
    ClientFailure { client: usize, reason: String },

    #[error("evaluation integrity: {excluded} of {total} samples excluded")]
    EvaluationIntegrity { excluded: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

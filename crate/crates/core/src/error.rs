use std::path::PathBuf;

/// Errors raised by the calibration toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("Gram matrix is not positive definite (nugget {nugget}, condition estimate {condition_estimate:.3e})")]
    SingularGram { nugget: f64, condition_estimate: f64 },

    #[error("insufficient samples for diagnostic: need at least {required}, have {available}")]
    InsufficientSamples { required: usize, available: usize },

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("particle blow-up in seed {seed} at iteration {iteration} (particle {particle}): {detail}")]
    ParticleBlowUp {
        seed: u64,
        iteration: usize,
        particle: usize,
        detail: String,
    },

    #[error("{failed} of {total} SVI seeds aborted")]
    TooManyAbortedSeeds { failed: usize, total: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

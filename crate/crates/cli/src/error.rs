use std::collections::BTreeMap;
use std::fmt::Display;

use serde::Serialize;

/// Failure reported on stderr as one JSON object.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CliError {
    pub stage: String,
    pub code: String,
    pub message: String,
    pub context: BTreeMap<String, String>,
}

impl CliError {
    pub fn new(stage: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.to_string(),
            code: code.to_string(),
            message: message.into(),
            context: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.context.insert(key.to_string(), value.to_string());
        self
    }

    /// Maps a library error onto the stage that raised it.
    pub fn from_core(stage: &str, e: epical::Error) -> Self {
        use epical::Error as E;
        let code = match &e {
            E::InvalidInput(_) | E::LengthMismatch { .. } => "invalid_input",
            E::SingularGram { .. } => "singular_gram",
            E::InsufficientSamples { .. } | E::DegenerateChain(_) => "diagnostic_failed",
            E::ParticleBlowUp { .. } | E::TooManyAbortedSeeds { .. } | E::NonFinite(_) => "numerical_failure",
            E::Malformed { .. } => "malformed_input",
            E::Io(_) => "io",
            E::Csv(_) | E::Json(_) => "malformed_input",
        };
        let mut err = Self::new(stage, code, e.to_string());
        if let E::Malformed { path, .. } = &e {
            err = err.with("path", path.display());
        }
        err
    }

    pub fn io(stage: &str, path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(stage, "io", e.to_string()).with("path", path.display())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.stage, self.code, self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a stage to library results.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> CliResult<T>;
}

impl<T> StageContext<T> for epical::Result<T> {
    fn stage(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(stage, e))
    }
}

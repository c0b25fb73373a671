use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the synthesis and accounting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient effective sample: {0}")]
    InsufficientEffectiveSample(String),

    #[error("invalid weights: {0}")]
    Weights(String),

    #[error("invalid range: {0}")]
    Range(String),

    #[error("mechanism mismatch: {0}")]
    MechanismMismatch(String),

    #[error("missing input for standard {standard}: {what}")]
    MissingInput { standard: String, what: String },

    #[error("target above uncalibrated budget: target {target}, budget at scale 1 is {budget}")]
    TargetAboveBudget { target: f64, budget: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attaches a pipeline stage label to an error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no rows left after label filtering")]
    EmptyCohort,

    #[error("cannot resample: {0}")]
    CannotResample(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("unsupported for this model kind: {0}")]
    Capability(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("cosine similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("prompt exceeds budget of {budget} chars ({len} after truncation)")]
    PromptOverBudget { budget: usize, len: usize },

    #[error("missing upstream artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: line {line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("missing required file {0}")]
    MissingFile(PathBuf),

    #[error("missing prerequisite artifact {path}: run `{stage}` first")]
    MissingPrerequisite { path: PathBuf, stage: String },

    #[error("artifact {path} was produced under config hash {found}, expected {expected}")]
    ConfigHashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("missing embedding for id `{0}`")]
    MissingEmbedding(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("gateway error: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),

    #[error("could not parse model response: {0}")]
    ResponseParse(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
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

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

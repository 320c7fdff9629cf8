use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest: {file}:{line}: field `{field}`: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("ingest: {file}:{line}: unknown label `{label}`")]
    UnknownLabel {
        file: PathBuf,
        line: usize,
        label: String,
    },
    #[error("ingest: subject `{0}` appears in the events file but not in the labels file")]
    UnlabeledSubject(String),
    #[error("ingest: duplicate subject `{0}` in labels file")]
    DuplicateSubject(String),
    #[error("ingest: subject `{0}` has no events and no days_observed")]
    NoObservation(String),
    #[error("embedding: {0}")]
    Embedding(String),
    #[error("clustering: {0}")]
    Clustering(String),
    #[error("features: {0}")]
    Features(String),
    #[error("classifier: {0}")]
    Classifier(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("introspect: {0}")]
    Introspect(String),
    #[error("synthgen: {0}")]
    Synth(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input or configuration, as opposed to failures
    /// while running the pipeline.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownLabel { .. }
                | Error::UnlabeledSubject(_)
                | Error::DuplicateSubject(_)
                | Error::NoObservation(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Io { .. }
        )
    }
}

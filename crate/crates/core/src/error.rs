use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("ingestion failed at {record}: {message}")]
    Ingest { record: String, message: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("requested {requested} exemplars for category {category}, only {available} available")]
    Exemplars {
        category: u32,
        requested: usize,
        available: usize,
    },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("prompt spec invalid: {0}")]
    Prompt(String),

    #[error("paraphraser output malformed at line {line:?}")]
    ParaphraseFormat { line: String },

    #[error("ambiguity: paraphrase {paraphrase:?} of category {category} equals another category name")]
    Ambiguity { category: u32, paraphrase: String },

    #[error("oracle {oracle} failed: {message}")]
    Oracle { oracle: String, message: String },

    #[error("external command {program} failed: {message}")]
    Command { program: String, message: String },

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },

    #[error("{0}")]
    Missing(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

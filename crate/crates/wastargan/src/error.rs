use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("audio error: {0}")]
    Audio(String),

    #[error("analysis failed for utterance {utt_id}: {detail}")]
    Analysis { utt_id: String, detail: String },

    #[error("degenerate source F0 statistics (std = 0)")]
    DegenerateF0Source,

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("speaker {speaker} has only {available} utterances, {requested} requested")]
    InsufficientSamples {
        speaker: String,
        available: usize,
        requested: usize,
    },

    #[error("unknown speaker label {0:?}")]
    UnknownSpeaker(String),

    #[error("feature cache entry missing for utterance {0}")]
    MissingFeatures(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss {
        component: &'static str,
        iteration: u64,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("container format error in {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

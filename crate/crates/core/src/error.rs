use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("no trajectory is long enough for segments of length {segment_len}")]
    NoEligibleTrajectory { segment_len: usize },

    #[error("segment is missing oracle rewards required by the annotator")]
    MissingOracleRewards,

    #[error("empty dataset{}", .0.as_ref().map(|p| format!(": {}", p.display())).unwrap_or_default())]
    EmptyDataset(Option<PathBuf>),

    #[error("schema error at {path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("delta_t {delta} exceeds future length {k}")]
    DeltaOutOfRange { delta: usize, k: usize },

    #[error("reward model kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: &'static str, found: &'static str },

    #[error("hindsight reward model requires an attached VAE")]
    MissingVae,

    #[error("labeling mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("value estimates diverged at step {step}: |V| = {value:.3} exceeds bound {bound:.3}")]
    Divergence { step: usize, value: f64, bound: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// True for errors caused by invalid configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("non-finite value produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("position {position} outside context length {ctx_len}")]
    Range { position: usize, ctx_len: usize },

    #[error("cache consistency: {0}")]
    Cache(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("learning-rate schedule exhausted at step {step} (schedule length {len})")]
    ScheduleExhausted { step: usize, len: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("non-finite {component} at step {step}")]
    Divergence { step: usize, component: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than a runtime failure.
    pub fn is_schema(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. } | Error::UnknownKey(_) | Error::Config(_)
        )
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("dataset error at line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bloom filters of attribute `{attribute}` still collide after {attempts} salt attempts")]
    SaltExhausted { attribute: String, attempts: u32 },

    #[error("report format error at line {line}: {message}")]
    ReportFormat { line: usize, message: String },

    #[error("reports were produced under different headers")]
    MixedHeaders,

    #[error("solver did not converge after {iterations} sweeps (max coordinate change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("estimation failed for cluster {cluster:?}: {message}")]
    Estimation { cluster: Vec<usize>, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

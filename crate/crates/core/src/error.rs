use thiserror::Error;

/// Errors surfaced by the synforce library.
#[derive(Debug, Error)]
pub enum SynforceError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("evaluation requires both classes: {0}")]
    SingleClass(String),

    #[error("loss diverged in term `{term}`: {detail}")]
    LossDiverged { term: String, detail: String },

    #[error("CFL stability bound violated: dt={dt} exceeds h^2/(4D)={bound}")]
    CflViolation { dt: f64, bound: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynforceError>;

impl SynforceError {
    pub fn config(msg: impl Into<String>) -> Self {
        SynforceError::Config(msg.into())
    }
    pub fn schema(msg: impl Into<String>) -> Self {
        SynforceError::Schema(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        SynforceError::Input(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        SynforceError::Shape(msg.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] hybrid_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("correctness: {0}")]
    Oracle(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

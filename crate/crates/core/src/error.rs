use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected} bits, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("insufficient sample: {0}")]
    InsufficientSample(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("did not converge after {iterations} iterations: {detail}")]
    Convergence { iterations: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

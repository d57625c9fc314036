use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("projection error: {0}")]
    Projection(String),
    #[error("empty distribution: {0}")]
    EmptyDistribution(String),
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("distribution not normalized (sum = {0})")]
    Normalization(f64),
    #[error("signature error: {0}")]
    Signature(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("corrupted data: {0}")]
    Corruption(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Conflict(_) => 3,
            Error::Corruption(_) | Error::Format(_) => 4,
            _ => 2,
        }
    }
}

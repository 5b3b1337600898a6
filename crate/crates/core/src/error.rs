use thiserror::Error;

/// Crate-wide error type. The CLI maps `Config` to exit code 2 and
/// `Numerical` to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code per the CLI contract: 2 for configuration
    /// problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::EmptyCorpus | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

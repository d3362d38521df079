use thiserror::Error;

/// Failure modes surfaced by the library and mapped onto CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("evaluation error at step {step}: {message}")]
    Evaluation { step: usize, message: String },
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code: 1 for configuration problems, 2 for numerical
    /// failures, 3 for resource caps.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Io { .. } => 1,
            Error::Numerical(_) | Error::Evaluation { .. } => 2,
            Error::ResourceCap(_) => 3,
        }
    }
}

use thiserror::Error;

/// Errors surfaced by the simulator.
///
/// `Config` errors map to exit code 2 at the CLI boundary, everything else
/// to exit code 1.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unreachable endpoint pair {src} -> {dst}")]
    Connectivity { src: String, dst: String },
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("plan rejected: {0}")]
    InvalidPlan(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, kinds or settings that cannot describe a valid computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN/Inf produced or consumed somewhere in the graph.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A call made in a state that does not allow it (e.g. train-mode BN with one sample).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Backward called without the activations saved by forward.
    #[error("state error: {0}")]
    State(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::Manifest(_) | Error::Corruption(_) | Error::Protocol(_) => 3,
            Error::Numeric(_) | Error::State(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

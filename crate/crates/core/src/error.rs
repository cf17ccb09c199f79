use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record at byte offset {offset}: {reason}")]
    MalformedRecord { offset: u64, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown {kind} `{key}`")]
    Lookup { kind: &'static str, key: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("log-likelihood became non-finite at sweep {sweep}")]
    Divergence { sweep: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

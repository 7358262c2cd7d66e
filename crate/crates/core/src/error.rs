use thiserror::Error;

/// Errors raised by the model, the losses and the file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// Every entry along a softmax or pooling axis was masked out.
    #[error("all entries masked: {0}")]
    AllMasked(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a documented precondition (shape, size, scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Numeric(_) | Error::AllMasked(_) => 3,
            Error::Format(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

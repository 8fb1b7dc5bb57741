//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or matrix shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Input data is well-formed but unusable (too short, wrong rate, misaligned).
    #[error("data error: {0}")]
    Data(String),
    /// A binary container or text file is corrupt or has an unexpected layout.
    #[error("format error: {0}")]
    Format(String),
    #[error("missing model parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),
    #[error("unknown model parameters: {}", .0.join(", "))]
    UnknownParameters(Vec<String>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code used by the command-line front-end.
    ///
    /// `2` is reserved for usage errors, which are reported by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::MissingParameters(_)
            | Error::UnknownParameters(_)
            | Error::Wav(_)
            | Error::Csv(_)
            | Error::Json(_) => 4,
            Error::InvalidArgument(_) => 2,
            _ => 3,
        }
    }
}

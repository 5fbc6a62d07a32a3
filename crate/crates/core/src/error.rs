use std::path::PathBuf;

/// Errors raised by the codec, the trainer and the evaluation tools.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("variant error: {0}")]
    Variant(String),

    #[error("symbol {symbol} outside the coding range [-{max}, {max}]")]
    Range { symbol: i64, max: i64 },

    #[error("coding error: {0}")]
    Coding(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint: {0}")]
    Version(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures caused by the input data rather than by how the
    /// library was called.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Ingestion { .. }
                | Error::Decode(_)
                | Error::Format(_)
                | Error::Version(_)
                | Error::Io(_)
                | Error::Evaluation(_)
        )
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: bad IDX file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        {
            // bound first so NaN operands fail the check
            let ok: bool = $cond;
            if !ok {
                return Err($crate::error::Error::$variant(format!($($fmt)+)));
            }
        }
    };
}
pub(crate) use ensure;

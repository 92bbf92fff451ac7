use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes or an axis outside the tensor rank.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Extents that do not tile, divide, or produce an integral output size.
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version: {0}")]
    Version(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("training diverged at step {step}: {detail}")]
    Training { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;

use thiserror::Error;

/// Errors produced by the library. The CLI maps [`Error::Usage`] to exit
/// code 2 and everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is out of range (limit {limit})")]
    Range {
        what: &'static str,
        value: u64,
        limit: u64,
    },

    #[error(
        "{axis} extent spans cell {cell} but {bits} bits per axis only address {limit} cells; \
         use --bits {required} or a larger grid size"
    )]
    ExtentOverflow {
        axis: char,
        cell: u64,
        bits: u32,
        limit: u64,
        required: u32,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value after {stage}")]
    NumericHealth { stage: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

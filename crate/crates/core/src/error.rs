use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The operation does not support the given smoothing filter kind.
    #[error("unsupported filter kind {0} for this operation")]
    UnsupportedKind(&'static str),

    /// Synthetic data could not be generated.
    #[error("dataset generation failed: {0}")]
    Generation(String),

    /// Training diverged.
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    /// The run was cancelled before completion.
    #[error("interrupted")]
    Interrupted,

    /// Malformed serialized data.
    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Parameter(format!($($arg)*))
    };
}
pub(crate) use param_err;

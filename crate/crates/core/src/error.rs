//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Mismatched vector/matrix dimensions or out-of-range sizes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input that cannot produce a meaningful template (constant image,
    /// all-equal projection, ...). The caller should re-key or reject.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid parameter value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The interval set fails the reversal-hardness condition
    /// `sum_i (K - 2i) p_i > 0`; enrollment refuses it by default.
    #[error(
        "interval set is not reversal-hard (sum (K-2i) p_i = {value}); \
         use the unsafe override to enroll anyway"
    )]
    NonHardIntervals { value: f64 },

    /// Distance is undefined because `N * K = 0`.
    #[error("undefined distance: negative database has N*K = 0")]
    UndefinedDistance,

    /// Text parse failure, with the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A loaded structure violates a format invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// I/O failure with path context.
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

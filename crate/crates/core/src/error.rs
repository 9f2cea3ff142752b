use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged at t={time}: loss {loss:e} exceeds {limit:e}")]
    Divergence { time: f64, loss: f64, limit: f64 },

    #[error("singular resolvent at s={s}: eigenvalue {eigenvalue} of lambda*H_{unit} is within {distance:e}")]
    SingularResolvent {
        s: f64,
        unit: usize,
        eigenvalue: f64,
        distance: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::SingularResolvent { .. } | Error::Numerical(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Early return unless `$cond` holds. Written as `!cond` on purpose, so that a
/// NaN operand fails the check.
macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "cholesky factorisation failed for a {size}x{size} node covariance \
         (nugget escalated to {nugget:e}, diagonal in [{min_diag:e}, {max_diag:e}])"
    )]
    NotPositiveDefinite {
        size: usize,
        nugget: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("posterior file: {0}")]
    Format(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("no retained draws")]
    NoDraws,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the
    /// caller's input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite { .. } | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

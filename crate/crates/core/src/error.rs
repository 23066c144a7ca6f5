use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Bisection could not bracket a root of h'(x) = t.
    #[error("could not bracket the inverse of h' at t = {t}: {reason}")]
    Bracket { t: f64, reason: String },

    #[error("non-finite value in solver iterate at iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("singular Gram matrix; near-collinear columns: {}", columns.join(", "))]
    SingularGram { columns: Vec<String> },

    #[error("{0}")]
    Tuning(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures while reading tabular input. Each variant has a stable code.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("row {row}, column '{column}': cannot parse '{value}'")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: non-finite covariate in column '{column}'")]
    NonFinite { row: usize, column: String },

    #[error("empty file: {0}")]
    Empty(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl DataError {
    pub fn code(&self) -> &'static str {
        match self {
            DataError::MissingColumn(_) => "E_MISSING_COLUMN",
            DataError::Parse { .. } => "E_PARSE",
            DataError::NonFinite { .. } => "E_NON_FINITE",
            DataError::Empty(_) => "E_EMPTY",
            DataError::Csv(_) => "E_CSV",
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    /// `row` is the 1-based data row (the header is not counted).
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid fold count {folds} for {n} rows (need 1 <= J <= n)")]
    InvalidFoldCount { folds: usize, n: usize },

    #[error("value out of range{}: {msg}", fmt_row(.row))]
    Range { row: Option<usize>, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty treatment arm: {0}")]
    EmptyArm(String),

    #[error("no scores for treatment level {0}")]
    MissingLevel(u32),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("failed to converge: {0}")]
    Convergence(String),

    #[error("input of size {size} exceeds limit {limit}")]
    SizeLimit { size: usize, limit: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{failed} of {total} replicates failed for method `{method}` (limit 5%)")]
    TooManyFailures {
        method: String,
        failed: usize,
        total: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_row(row: &Option<usize>) -> String {
    match row {
        Some(r) => format!(" at row {r}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn range(row: usize, msg: impl Into<String>) -> Self {
        Error::Range {
            row: Some(row),
            msg: msg.into(),
        }
    }

    pub(crate) fn range_msg(msg: impl Into<String>) -> Self {
        Error::Range {
            row: None,
            msg: msg.into(),
        }
    }

    /// True for errors caused by malformed or invalid input rather than by a
    /// failed computation. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::Parse { .. }
                | Error::EmptyInput(_)
                | Error::InvalidFoldCount { .. }
                | Error::Range { .. }
                | Error::Shape(_)
                | Error::MissingLevel(_)
                | Error::Precondition(_)
                | Error::SizeLimit { .. }
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}

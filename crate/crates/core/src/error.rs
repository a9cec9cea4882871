use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),

    #[error("no rows")]
    NoRows,

    #[error("line {line}: expected {expected} fields, found {found}")]
    RowLength {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("line {line}, column `{column}`: cannot parse `{value}` ({reason})")]
    UnparseableCell {
        line: u64,
        column: String,
        value: String,
        reason: &'static str,
    },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("column `{0}` is not numeric")]
    NonNumericColumn(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid similarity rule for column `{column}`: {reason}")]
    InvalidRule { column: String, reason: String },

    #[error("exact engine supports at most {cap} features (got {d}); use the permutation engine")]
    TooManyFeatures { d: usize, cap: usize },

    #[error("model failure: {0}")]
    Model(String),

    #[error("logistic fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("logistic fit failed: {0}")]
    Separation(String),

    #[error("corner weights are not a product measure (max deviation {deviation:e})")]
    NonProductWeights { deviation: f64 },

    #[error("incomplete cube table: expected {expected} values, found {found}")]
    IncompleteTable { expected: usize, found: usize },

    #[error("predictions not attached to dataset")]
    MissingPredictions,
}

//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// CSV/JSON row could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The nesting structure is broken (e.g. a class under two schools) or a
    /// higher-level covariate varies within its unit.
    #[error("structural error for {unit}: {message}")]
    Structure { unit: String, message: String },

    /// Invalid inputs: bad dimensions, unknown columns, infeasible configs.
    #[error("validation error: {0}")]
    Validation(String),

    /// No students survive listwise deletion.
    #[error("empty analysis: {0}")]
    EmptyAnalysis(String),

    /// Design matrix is rank deficient.
    #[error("rank-deficient design; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    /// A covariance block is numerically singular.
    #[error("ill-conditioned covariance ({context}); condition estimate {condition:.3e}")]
    IllConditioned { context: String, condition: f64 },

    /// A gradient coordinate evaluated to NaN or infinity.
    #[error("non-finite gradient in coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },

    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV layer failure not tied to a specific row.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Structured single-line JSON rendering, used by the CLI on stderr.
    pub fn to_json(&self) -> String {
        let kind = match self {
            Error::Parse { .. } => "parse",
            Error::Structure { .. } => "structure",
            Error::Validation(_) => "validation",
            Error::EmptyAnalysis(_) => "empty_analysis",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        };
        serde_json::json!({ "error": kind, "message": self.to_string() }).to_string()
    }
}

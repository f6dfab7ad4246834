use thiserror::Error;

/// Errors raised while building, fitting or evaluating a growth curve model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("column `{0}` is constant and cannot be standardized")]
    DegenerateColumn(String),

    #[error("numerically singular {what} (determinant {det:e})")]
    Singular { what: String, det: f64 },

    #[error("design `{0}` has a singular Gram matrix (collinear columns)")]
    Collinear(&'static str),

    #[error("degenerate posterior moments for coordinate {0}")]
    DegeneratePosterior(usize),

    #[error("degenerate design for random slope of outcome {0}: zero time variation with nonzero score")]
    DegenerateDesign(usize),

    #[error("problem too large for dense oracle: {0}")]
    TooLarge(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

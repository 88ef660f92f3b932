use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({row}, {col}) out of range for dimension {n}")]
    IndexOutOfRange { row: usize, col: usize, n: usize },

    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mapper: {0}")]
    Mapper(String),

    #[error("unknown factor level {0:?}")]
    UnknownLevel(String),

    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown function {0:?}")]
    UnknownFunction(String),

    #[error("unknown component {0:?}")]
    UnknownComponent(String),

    #[error("evaluation error at row {row}: {msg}")]
    Eval { row: usize, msg: String },

    #[error("missing hyperparameter {0:?}")]
    MissingHyper(String),

    #[error("likelihood: {0}")]
    Likelihood(String),

    #[error("Newton iteration failed: {0}")]
    Newton(String),

    #[error("optimiser failed: {0}")]
    Optimizer(String),

    #[error("line search: {0}")]
    LineSearch(String),

    #[error("nonlinearity too strong for Gaussian comparison: {0}")]
    NonlinearityTooStrong(String),

    #[error("diagnostic: {0}")]
    Diagnostic(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("model: {pointer}: {msg}")]
    Schema { pointer: String, msg: String },

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NonFinite { .. } => "non_finite",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Mapper(_) => "mapper",
            Error::UnknownLevel(_) => "unknown_level",
            Error::Syntax { .. } => "syntax",
            Error::UnknownFunction(_) => "unknown_function",
            Error::UnknownComponent(_) => "unknown_component",
            Error::Eval { .. } => "eval",
            Error::MissingHyper(_) => "missing_hyper",
            Error::Likelihood(_) => "likelihood",
            Error::Newton(_) => "newton",
            Error::Optimizer(_) => "optimizer",
            Error::LineSearch(_) => "line_search",
            Error::NonlinearityTooStrong(_) => "nonlinearity_too_strong",
            Error::Diagnostic(_) => "diagnostic",
            Error::Calibration(_) => "calibration",
            Error::Schema { .. } => "schema",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn schema(pointer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema { pointer: pointer.into(), msg: msg.into() }
    }
}

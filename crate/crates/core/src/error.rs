use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported Matérn smoothness {0}; expected one of 0.5, 1.5, 2.5")]
    UnsupportedSmoothness(f64),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("Cholesky factorisation failed even with diagonal jitter {max_jitter:e}")]
    CholeskyFailed { max_jitter: f64 },

    #[error("posterior precision not positive definite at Gibbs iteration {iteration}")]
    NotPositiveDefinite { iteration: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cube cannot be split: {0}")]
    Unsplittable(String),

    #[error("cube contains no evaluated configurations")]
    EmptyCube,

    #[error("malformed input at row {row}: {message}")]
    Malformed { row: usize, message: String },

    #[error("replicate (setting {setting}, m {m}, replicate {replicate}): {source}")]
    Replicate {
        setting: usize,
        m: usize,
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::UnsupportedSmoothness(_) => "unsupported_smoothness",
            Error::NoConvergence { .. } => "no_convergence",
            Error::CholeskyFailed { .. } => "cholesky_failed",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::EmptyInput(_) => "empty_input",
            Error::Unsplittable(_) => "unsplittable",
            Error::EmptyCube => "empty_cube",
            Error::Malformed { .. } => "malformed_input",
            Error::Replicate { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Toml(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}

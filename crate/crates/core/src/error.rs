use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); add jitter")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("triangular factor is singular at diagonal entry {index}")]
    SingularFactor { index: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("unknown entity id {id} (valid range 1..={max})")]
    UnknownEntity { id: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    #[error("numerical invariant violated: {0}")]
    InvariantViolated(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),

    #[error("target is constant; R^2 is undefined")]
    DegenerateTarget,

    #[error("matrix of size {n} exceeds the cap of {cap} rows")]
    SizeCapExceeded { n: usize, cap: usize },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Rejected settings rather than rejected data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::InvalidFractions(_))
    }

    /// Failures caused by the numerical state of a model rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularFactor { .. }
                | Error::NotSymmetric { .. }
                | Error::NonFiniteValue(_)
                | Error::InvariantViolated(_)
                | Error::DegenerateTarget
        )
    }

    /// Failures caused by malformed or incompatible input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::MissingColumn(_)
                | Error::UnknownEntity { .. }
                | Error::ShapeMismatch { .. }
                | Error::SizeCapExceeded { .. }
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum GmedError {
    #[error("no mediator matrix found for unit '{0}'")]
    MissingMediator(String),

    #[error("dimension mismatch at {location}: expected {expected}, found {found}")]
    DimensionMismatch {
        location: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at {0}")]
    NonFiniteValue(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("pooled covariance is not positive definite (p too large or degenerate data)")]
    SingularPooledCovariance,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("state is infeasible: a quadratic form fell below the floor")]
    InfeasibleState,

    #[error("initial projection is infeasible for unit index {0}")]
    InfeasibleStart(usize),

    #[error("regression design is rank deficient")]
    RankDeficientDesign,

    #[error("no eigen-candidate yields a feasible projection")]
    NoFeasibleCandidate,

    #[error("every optimization start was infeasible")]
    AllStartsInfeasible,

    #[error("log term infeasible for unit index {unit}, component {component}")]
    InfeasibleLogTerm { unit: usize, component: usize },

    #[error("projected covariance is singular for unit index {0}")]
    SingularProjectedCovariance(usize),

    #[error("at least two draws are required, got {0}")]
    TooFewDraws(usize),

    #[error("bootstrap resample is degenerate")]
    DegenerateResample,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl GmedError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GmedError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by the input files rather than the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            GmedError::MissingMediator(_)
                | GmedError::DimensionMismatch { .. }
                | GmedError::NonFiniteValue(_)
                | GmedError::Parse(_)
                | GmedError::Io { .. }
                | GmedError::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GmedError>;

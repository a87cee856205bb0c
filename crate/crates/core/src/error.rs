use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate weights: all weights are zero")]
    DegenerateWeights,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("correlation undefined: zero weighted variance")]
    UndefinedCorrelation,

    #[error("empty input")]
    EmptyInput,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("invalid scale {0}: standard deviation must be positive")]
    InvalidScale(f64),

    #[error("singular design: column `{column}` is linearly dependent on preceding columns")]
    SingularDesign { column: String },

    #[error("covariance matrix is not positive semidefinite")]
    CovarianceNotPsd,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dataset has no exposures")]
    EmptyExposures,

    #[error("{what} index {index} out of range (have {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate density: residual sd is zero in the model for `{0}`")]
    DegenerateDensity(String),

    #[error("trim quantile {0} must lie in (0.5, 1]")]
    InvalidTrim(f64),

    #[error("entropy balancing did not converge after {iterations} iterations (max violation {violation:e})")]
    NoConvergence { iterations: usize, violation: f64 },

    #[error("balance constraints are infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate hull: {0}")]
    DegenerateHull(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("insufficient support: {retained} units inside the region, need at least {required}")]
    InsufficientSupport { retained: usize, required: usize },

    #[error("point {0:?} lies outside the estimable region")]
    Extrapolation(Vec<f64>),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateWeights
                | Error::UndefinedCorrelation
                | Error::SingularDesign { .. }
                | Error::CovarianceNotPsd
                | Error::DegenerateDensity(_)
                | Error::NoConvergence { .. }
                | Error::Infeasible(_)
                | Error::DegenerateHull(_)
                | Error::DegenerateRegion(_)
                | Error::InsufficientSupport { .. }
                | Error::Extrapolation(_)
                | Error::MetricUndefined(_)
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

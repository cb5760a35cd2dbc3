use thiserror::Error;

/// Every failure the laboratory can report.
///
/// The CLI maps these onto exit codes via [`LabError::exit_code`].
#[derive(Debug, Error)]
pub enum LabError {
    #[error("mollification did not converge: gap {gap:.3e} between the two finest levels exceeds {tol:.3e}")]
    NonConvergent { gap: f64, tol: f64 },

    #[error(
        "quadrature failed on [{lo}, {hi}]: error estimate {error:.3e} above tolerance {tol:.3e}"
    )]
    QuadratureFailure {
        lo: f64,
        hi: f64,
        error: f64,
        tol: f64,
    },

    #[error("{what} = {value} lies outside the tabulated range [{lo}, {hi}]")]
    RangeError {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("divergent kernel moment: {0}")]
    DivergentMoment(String),

    #[error("big-jump intensity {rate:.6} exceeds the dominating bound {bound:.6}")]
    IntensityBoundViolated { rate: f64, bound: f64 },

    #[error("epsilon/time {value} is not a multiple of the grid step {dt}")]
    GridMismatch { value: f64, dt: f64 },

    #[error("ensemble lacks driver records: {0}")]
    MissingDriverRecord(String),

    #[error("effective sample size {ess:.2} below 10")]
    DegenerateWeights { ess: f64 },

    #[error("{excluded} of {total} paths left the tabulated range (limit 1%)")]
    TooManyExclusions { excluded: usize, total: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl LabError {
    /// 2 for validation problems, 3 for numeric and io failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        LabError::Validation(msg.into())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for LabError {
    fn from(e: toml::de::Error) -> Self {
        LabError::Validation(format!("configuration: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

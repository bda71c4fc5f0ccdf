use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared by every module of the laboratory.
///
/// The variants are grouped by who is at fault: the caller (bad parameters),
/// the mathematics (a hypothesis of the statement being exercised is not met
/// by the data), or the numerics (overflow, non-convergence, escape).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown system `{0}` (expected one of cat_map, solenoid, skew_center, contraction)")]
    UnknownSystem(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("domination refuted: {0}")]
    DominationRefuted(String),

    #[error("insufficient sample: {0}")]
    InsufficientSample(String),

    #[error("orbit escaped the attracting neighbourhood at step {step}: {detail}")]
    Escape { step: usize, detail: String },

    #[error("graph transform left the chart: {0}")]
    ChartExit(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("did not converge after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn hypothesis(msg: impl Into<String>) -> Self {
        Error::HypothesisViolation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Coarse classification used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) | Error::UnknownSystem(_) => ErrorKind::Config,
            Error::HypothesisViolation(_) | Error::DominationRefuted(_) => ErrorKind::Hypothesis,
            Error::InsufficientSample(_)
            | Error::Escape { .. }
            | Error::ChartExit(_)
            | Error::Numerical(_)
            | Error::NonConvergence { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Hypothesis,
    Numerical,
}

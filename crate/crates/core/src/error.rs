use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Evaluation on the collision set, where the energy is infinite.
    #[error("singular point: {0}")]
    Singularity(String),

    #[error("floating-point range exceeded: {0}")]
    OverflowDomain(String),

    #[error("numerical blow-up at step {step}: {detail}")]
    NumericalBlowup { step: usize, detail: String },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("point {point:?} left the domain{}", exit_time.map(|t| format!(" at t = {t}")).unwrap_or_default())]
    OutOfDomain { point: Vec<f64>, exit_time: Option<f64> },

    #[error("interpolated density {density:e} below floor {floor:e} at {point:?}")]
    DensityFloor { density: f64, floor: f64, point: Vec<f64> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// `true` for failures caused by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidArgument(_) | Error::Parse(_) | Error::Io(_)
        )
    }
}

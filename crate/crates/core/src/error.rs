use thiserror::Error;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("log-branch: eigenvalue {re:+.3e}{im:+.3e}i lies on the closed negative real axis; channel too far from identity for a principal generator")]
    LogBranch { re: f64, im: f64 },

    #[error("timestep too large: dt*theta = {product:.3} >= 0.1 for bath mode {mode} (theta = {theta:.3e} 1/s)")]
    TimestepTooLarge { mode: usize, theta: f64, product: f64 },

    #[error("fit failure after {iterations} iterations (rms residual {residual:.3e}): {reason}")]
    FitFailure {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    #[error("channel is not linear: superposition violated by {0:.3e}")]
    Nonlinear(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shot {shot}: {source}")]
    Shot {
        shot: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) => true,
            Error::Shot { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn in_shot(self, shot: usize) -> Self {
        Error::Shot {
            shot,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by the library. Infeasibility of an optimization problem is
/// not an error: it is reported through [`crate::qp::SolveStatus`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("hessian is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("non-finite state encountered at step {0}")]
    NonFinite(usize),
    #[error("predictor buffer holds {got} inputs but the delay is {tau}")]
    Buffer { tau: usize, got: usize },
    #[error("initial state violates barrier `{label}` (h = {value:e})")]
    UnsafeInitialState { label: String, value: f64 },
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("config: {0}")]
    Config(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}

use thiserror::Error;

/// Errors produced by the sparse PCA workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("eigen solver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("eigenvalue {index} is not simple (gap {gap:e})")]
    DegenerateEigenvalue { index: usize, gap: f64 },

    #[error("infeasible construction: {0}")]
    InfeasibleConstruction(String),

    #[error("l_q ball violated: {0}")]
    BallViolation(String),

    #[error("invalid configuration ({key}): {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by bad user input rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidModel(_)
                | Error::Precondition(_)
                | Error::BallViolation(_)
                | Error::InfeasibleConstruction(_)
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error types shared by the whole crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, EivError>;

#[derive(Debug, Error)]
pub enum EivError {
    /// A parameter or argument is outside the admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that must be (semi)definite failed its factorization.
    /// `index` identifies the observation when the failure is per-observation;
    /// `pivot` is the first Cholesky pivot that went non-positive.
    #[error("matrix not positive definite ({what}{})", index.map(|i| format!(", observation {i}")).unwrap_or_default())]
    NotPositiveDefinite {
        what: &'static str,
        index: Option<usize>,
        pivot: usize,
    },

    /// Dimension bookkeeping went wrong.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The optimizer exhausted its iteration budget. The best iterate found so
    /// far is carried along for diagnostics.
    #[error("maximum likelihood fit did not converge after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        best: Box<crate::likelihood::FitResult>,
    },

    /// A data file or record failed validation.
    #[error("invalid data: {0}")]
    InvalidData(String),
}

impl EivError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EivError::InvalidArgument(msg.into())
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A hyperparameter vector violates the C1/C2 constraint structure.
    #[error("constraint violation: {0}")]
    Constraint(String),

    /// A non-finite value reached a recursive update; the state is unchanged.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("factorization failed: {0}")]
    Singular(String),

    /// A matrix that must be positive definite is not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A hyperparameter re-linearization was rejected: it would destroy
    /// positive definiteness of the gain matrix or it falls outside the
    /// validity radius of the truncated expansion. The caller should shrink
    /// the step.
    #[error("hyperparameter step rejected: {0}")]
    StepRejected(String),

    /// The fit score is undefined because the measured output is constant.
    #[error("fit undefined: measured output has zero variance")]
    UndefinedFit,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

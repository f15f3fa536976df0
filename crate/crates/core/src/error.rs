use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unknown quadrature label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate quadrature label `{0}`")]
    DuplicateLabel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance matrix is not symmetric (deviation {0:e})")]
    NotSymmetric(f64),

    #[error("unphysical state: covariance has eigenvalue {0:e} below the PSD tolerance")]
    NotPositiveSemidefinite(f64),

    #[error("not enough samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors raised by the engine, the event store and the analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("lifecycle: {0}")]
    Lifecycle(String),

    #[error("no eligible arm: every arm is paused")]
    NoEligibleArm,

    #[error("degenerate variance: both groups have zero variance but different means")]
    DegenerateVariance,

    #[error("integrity error at sequence {sequence}: {message}")]
    Integrity { sequence: u64, message: String },

    #[error("replay error at sequence {sequence}: {message}")]
    Replay { sequence: u64, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn replay(sequence: u64, msg: impl Into<String>) -> Self {
        Error::Replay {
            sequence,
            message: msg.into(),
        }
    }

    /// Coarse class used by the HTTP layer and the CLI exit code mapping.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_)
            | Error::InvalidState(_)
            | Error::NoEligibleArm
            | Error::DegenerateVariance
            | Error::Parse(_) => ErrorClass::Invalid,
            Error::NotFound(_) => ErrorClass::NotFound,
            Error::Conflict(_) => ErrorClass::Conflict,
            Error::Lifecycle(_) => ErrorClass::Lifecycle,
            Error::Integrity { .. } | Error::Replay { .. } | Error::Io(_) => ErrorClass::Integrity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    NotFound,
    Conflict,
    Invalid,
    Lifecycle,
    Integrity,
}

impl ErrorClass {
    pub fn code(self) -> &'static str {
        match self {
            ErrorClass::NotFound => "not_found",
            ErrorClass::Conflict => "conflict",
            ErrorClass::Invalid => "invalid",
            ErrorClass::Lifecycle => "lifecycle",
            ErrorClass::Integrity => "integrity",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

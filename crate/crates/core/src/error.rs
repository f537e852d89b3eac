use thiserror::Error;

use crate::storage::StorageError;

/// Errors raised by the protocol state machines and the domain types.
///
/// `LogStopped` and `TruncationViolated` are bug detectors: an honest
/// execution never produces them, so the harness records them as violations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("log is stopped: nothing may follow a stop-sign")]
    LogStopped,

    #[error("index {index} is below the truncation offset {offset}")]
    TruncationViolated { index: u64, offset: u64 },

    #[error("index {index} is past the end of the log (length {len})")]
    IndexOutOfRange { index: u64, len: u64 },

    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

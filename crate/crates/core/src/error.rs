use std::time::Duration;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("index {index} out of range (must be < {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("rank {0} attempted to send to itself")]
    SelfSend(usize),

    #[error("rank {0} is not a member of this communicator")]
    NotMember(usize),

    #[error("peer {0} is unreachable")]
    PeerUnreachable(usize),

    #[error("operation timed out after {0:?}")]
    Timeout(Duration),

    #[error("simulated ranks deadlocked: every live rank is blocked in recv")]
    Deadlock,

    #[error("length mismatch: expected {expected} elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("buffer of {len} elements is not divisible into {parts} equal chunks")]
    NotDivisible { len: usize, parts: usize },

    #[error("{0} ranks is not a power of two")]
    NonPowerOfTwo(usize),

    #[error("calibration table is empty")]
    EmptyTable,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configurations differ in more than the NIC policy: {0}")]
    ConfigMismatch(String),

    #[error("no records for cell {0}")]
    EmptyCell(String),

    #[error("record grids differ: {0}")]
    GridMismatch(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridError;

/// Failure raised on a worker while it executes a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
pub enum Fault {
    #[error("no such object `{0}`")]
    NoSuchObject(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// `block` is the 1-based global block index of the failing diagonal
    /// block, `row` the 1-based global row of the non-positive pivot.
    #[error("matrix is not positive definite (diagonal block {block}, row {row})")]
    NotPositiveDefinite { block: usize, row: usize },
    #[error("zero or negative diagonal entry at row {index}")]
    SingularDiagonal { index: usize },
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("aborted: worker {peer} failed during the same collective")]
    PeerAborted { peer: usize },
    #[error("random streams have not been initialized on this worker")]
    StreamsUninitialized,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("worker panicked: {0}")]
    Panicked(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("cluster has been shut down")]
    ClusterDown,
    #[error("worker {rank}: {fault}")]
    Worker { rank: usize, fault: Fault },
    #[error("no such object `{0}`")]
    NoSuchObject(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("worker {rank} lost: {reason}")]
    WorkerLost { rank: usize, reason: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The worker-side fault, if this error came from a worker.
    pub fn fault(&self) -> Option<&Fault> {
        match self {
            Error::Worker { fault, .. } => Some(fault),
            _ => None,
        }
    }

    pub fn is_not_positive_definite(&self) -> bool {
        matches!(self.fault(), Some(Fault::NotPositiveDefinite { .. }))
    }

    /// True for a missing object, whether detected by the master's catalog or
    /// by a worker store.
    pub fn is_no_such_object(&self) -> bool {
        matches!(self, Error::NoSuchObject(_)) || matches!(self.fault(), Some(Fault::NoSuchObject(_)))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

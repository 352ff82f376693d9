use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot sample: {0}")]
    Unsampleable(String),
    #[error("only {eligible} eligible candidates, need {needed}")]
    InsufficientCandidates { eligible: usize, needed: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("id {id} outside {what} vocabulary of size {size}")]
    UnknownId { what: &'static str, id: usize, size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

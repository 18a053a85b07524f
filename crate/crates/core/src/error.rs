use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rating: {0}")]
    InvalidRating(f64),

    #[error("invalid k-factor: {0} (must be positive and finite)")]
    InvalidKFactor(f64),

    #[error("{what} needs at least {min} entries, got {got}")]
    Arity {
        what: &'static str,
        min: usize,
        got: usize,
    },

    #[error("budget exhausted: {needed} evaluations needed, {remaining} remaining")]
    BudgetExhausted { needed: u64, remaining: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("outcome lists are not aligned: {0}")]
    Alignment(String),

    #[error("plugin error: {0}")]
    Plugin(String),

    #[error("run store integrity error: {0}")]
    Integrity(String),

    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}

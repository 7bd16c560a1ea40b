use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: row {row_id} has zero norm")]
    ZeroRow { row_id: u32 },

    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("length error: {0}")]
    Length(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible assignment: {rows} rows but only {cols} columns")]
    Infeasible { rows: usize, cols: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty target: loss mask selects no positions")]
    EmptyTarget,

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    #[error("hash mismatch for {path}: manifest {expected}, file {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("workspace locked: {0}")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn sampling(msg: impl Into<String>) -> Self {
        Error::Sampling(msg.into())
    }
}

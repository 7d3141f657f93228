//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input file (IDX data, checkpoint, ...).
    #[error("format error in {path} at offset {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint incompatible with the requested model (shape/version drift).
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss or gradient.
    #[error(
        "non-finite value during training (epoch {epoch}, batch {batch}, parameter {param}, max |grad| {max_abs_grad})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        param: String,
        max_abs_grad: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: config errors, data errors and numerical
    /// aborts are distinguishable by code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } | Error::Io(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model description violates one of its structural invariants.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("top-k of {k} requested but only {experts} experts exist")]
    TopKExceedsExperts { k: usize, experts: usize },

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty prefix")]
    EmptyPrefix,

    #[error("restricted expert set for MoE layer {layer} has {size} experts, fewer than top-k {k}")]
    RestrictedSetTooSmall { layer: usize, size: usize, k: usize },

    #[error("no candidate draft expert left in MoE layer {layer}")]
    NoCandidate { layer: usize },

    #[error("device capacity exceeded: need {needed} bytes, capacity {capacity} bytes")]
    CapacityExceeded { needed: u64, capacity: u64 },

    /// Argument outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration rejected (file syntax or invariant).
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    /// Malformed trace or affinity file.
    #[error("{path}: line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty trace: no routed tokens")]
    EmptyTrace,

    #[error("refusing to emit an empty result table")]
    EmptyRows,

    /// An internal simulation invariant was broken; indicates a bug, not bad input.
    #[error("invariant breach: {0}")]
    InvariantBreach(String),

    #[error("sweep cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidSpec(_) => 1,
            Error::Cell { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

use std::io;

use thiserror::Error;

use crate::types::ItemId;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown item `{0}`")]
    UnknownItem(ItemId),

    #[error("rate is undefined: {0}")]
    UndefinedRate(String),

    #[error("invalid window {start}..{end}: {reason}")]
    InvalidWindow { start: u32, end: u32, reason: String },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("no constraint-feasible bipartition: {0}")]
    InfeasibleConstraints(String),

    #[error("graph has {nodes} nodes; exhaustive search is limited to {limit}")]
    TooLarge { nodes: usize, limit: usize },

    #[error("no candidates for target `{0}`")]
    NoCandidates(ItemId),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("panels are not comparable: {0}")]
    PanelMismatch(String),

    #[error("panel has no request-level exposure log")]
    MissingRequestLog,

    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

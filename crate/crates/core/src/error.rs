use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the discovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical fault at step {step}: non-finite activation")]
    NumericalFault { step: usize },

    #[error("invalid genome: {0}")]
    InvalidGenome(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("projection fit failed: reference set has rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no run found in {0}")]
    NoRun(PathBuf),

    #[error("run integrity error at stage {stage}: {reason}")]
    Integrity { stage: usize, reason: String },

    #[error("record {0} not found")]
    MissingRecord(usize),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

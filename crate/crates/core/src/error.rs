use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),

    #[error("cannot parse genotype `{text}`: {reason}")]
    GenotypeParse { text: String, reason: String },

    #[error("crossover parents belong to different search spaces")]
    FamilyMismatch,

    #[error("no valid distinct neighbour found after {0} attempts")]
    ValidityExhausted(usize),

    #[error("retry cap of {0} attempts exceeded")]
    RetryCapExceeded(usize),

    #[error("full enumeration is not supported for the {0} space")]
    UnsupportedSpace(&'static str),

    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },

    #[error("backward called without a live forward cache")]
    NoForwardCache,

    #[error("batch shape mismatch: expected {expected:?}, got {got:?}")]
    BatchShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("explored registry is empty")]
    EmptyRegistry,

    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),

    #[error("no feasible architecture found within {0} sampling attempts")]
    InfeasibleSpace(usize),

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("{path}:{line}: duplicate genotype `{genotype}`")]
    DuplicateGenotype { path: PathBuf, line: usize, genotype: String },

    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("no benchmark entry satisfies the constraints")]
    NoFeasibleEntry,

    #[error("genotypes missing from the benchmark: {0:?}")]
    MissingGenotype(Vec<String>),

    #[error("batch file: {0}")]
    BatchFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

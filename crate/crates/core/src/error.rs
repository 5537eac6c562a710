use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DagError {
    #[error("hierarchy has no nodes")]
    Empty,
    #[error("node id must not be empty")]
    EmptyNodeId,
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown level {0}")]
    UnknownLevel(u32),
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("node `{node}` is at level {node_level}, above requested level {level}")]
    LevelBelowNode { node: String, node_level: u32, level: u32 },
    #[error("selector `{0}` selects no nodes")]
    EmptySelection(String),
    #[error("malformed selector `{0}` (expected node:ID, down:ID, up:ID, updown:ID, level:L or all)")]
    BadSelector(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("input is empty")]
    EmptyInput,
    #[error("cannot determine format of `{0}`; pass an explicit format")]
    UnknownFormat(String),
    #[error("line {line}: expected {expected} probabilities, found {found}")]
    LengthMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: negative value {value} for `{key}`")]
    NegativeValue { line: usize, key: String, value: f64 },
    #[error("line {line}: value {value} for `{key}` is outside [0, 1]")]
    ValueOutOfRange { line: usize, key: String, value: f64 },
    #[error("line {line}: probabilities sum to {sum}, expected 1 within 1e-6")]
    NotNormalized { line: usize, sum: f64 },
    #[error("line {line}: unknown node `{key}`")]
    UnknownNodeKey { line: usize, key: String },
    #[error("line {line}: duplicate label `{key}`")]
    DuplicateLabel { line: usize, key: String },
    #[error("line {line}: duplicate instance id `{id}`")]
    DuplicateInstanceId { line: usize, id: String },
    #[error("line {line}: expected {expected} evidence, found {found}")]
    WrongEvidenceKind { line: usize, expected: &'static str, found: &'static str },
    #[error("mapping: node `{0}` appears more than once")]
    DuplicateMapping(String),
    #[error("mapping: unknown node `{0}`")]
    UnknownMappedNode(String),
    #[error("dense evidence requires an output mapping")]
    MissingMapping,
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no instances to evaluate")]
    EmptyCollection,
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("levels must satisfy from < to (got {from} and {to})")]
    LevelOrder { from: u32, to: u32 },
    #[error("instance `{0}` has no ground-truth label")]
    MissingTruth(String),
    #[error("concept pair uses the same node `{0}` twice")]
    SamePairNode(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{pairs} candidate pairs exceed the limit of {limit}; use co-supported pairs")]
    TooManyPairs { pairs: u128, limit: u128 },
    #[error("selector anchor `{0}` needs per-instance ground truth")]
    MissingAnchorTruth(String),
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown node `{id}` at position {pos}")]
    UnknownNode { pos: usize, id: String },
    #[error("unknown level {level} at position {pos}")]
    UnknownLevel { pos: usize, level: u32 },
    #[error("invalid threshold at position {pos}: {message}")]
    InvalidThreshold { pos: usize, message: String },
}

/// Errors surfaced while loading a session, with file context.
#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Ingest {
        path: PathBuf,
        #[source]
        source: IngestError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{0}")]
    Config(String),
}

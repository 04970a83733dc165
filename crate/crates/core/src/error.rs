use thiserror::Error;

use crate::taxonomy::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed taxonomy: {0}")]
    MalformedTaxonomy(String),

    #[error("non-uniform depth: node {node} ({name}) is a leaf at level {level} but the taxonomy depth is {depth}")]
    NonUniformDepth { node: usize, name: String, level: usize, depth: usize },

    #[error("duplicate node id {0}")]
    DuplicateId(usize),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),

    #[error("node {0} is a leaf")]
    IsALeaf(NodeId),

    #[error("top_k = {top_k} out of range: the root has {children} children")]
    TopKOutOfRange { top_k: usize, children: usize },

    #[error("depth mismatch: {0} vs {1}")]
    DepthMismatch(usize, usize),

    #[error("name-path conflict at {0}")]
    NamePathConflict(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("zero-norm feature vector")]
    ZeroNorm,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty feature set")]
    EmptyFeatureSet,

    #[error("loss function is not deterministic (coordinate evaluation mismatch)")]
    NonDeterministic,

    #[error("taxonomy has no instances")]
    NoInstances,

    #[error("label path not in taxonomy: {0}")]
    LabelNotInTaxonomy(String),

    #[error("child order regression at node {0}")]
    ChildOrderRegression(NodeId),

    #[error("unknown aggregation function {0:?}")]
    UnknownAggregation(String),

    #[error("category {0:?} not found in taxonomy")]
    UnmappedCategory(String),

    #[error("missing feature for annotation {0}")]
    MissingFeature(u64),

    #[error("malformed document: {0}")]
    MalformedDocument(String),

    #[error("leaf {leaf} has {available} examples, needs {required}")]
    InsufficientExamples { leaf: String, available: usize, required: usize },

    #[error("taxonomy fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("invalid ablation: {0}")]
    InvalidAblation(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

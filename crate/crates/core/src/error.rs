use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("query {query_id} has {count} candidates but the vocabulary allows at most {n_max}")]
    CandidateOverflow {
        query_id: String,
        count: usize,
        n_max: usize,
    },
    #[error("query {0} has no reference answer")]
    MissingReference(String),
    #[error("candidate {candidate} of query {query_id} has no precomputed similarity")]
    MissingPrecomputed { query_id: String, candidate: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}:{line}: {message}")]
    ParseAt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("candidate pointer <CAND_{0}> appears more than once")]
    DuplicatePointer(usize),
    #[error("sequence does not end with <ENDLIST>")]
    MissingEndList,
    #[error("mask is empty")]
    EmptyMask,
    #[error("target index {target} is not in the mask")]
    TargetNotInMask { target: usize },
    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("non-finite logit at row {row}, column {col}")]
    NonFiniteLogit { row: usize, col: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("ranking list is empty")]
    EmptyList,
    #[error("gain {0} is negative")]
    NegativeGain(f64),
    #[error("orders are not permutations of the same id set")]
    NotAPermutation,
    #[error("duplicate query id {0}")]
    DuplicateQueryId(String),
    #[error("query {query_id}: candidate ids must be 1..N, got {ids:?}")]
    BadCandidateIds { query_id: String, ids: Vec<usize> },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("run file invariant violated: {0}")]
    InvariantViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint {expected:016x}, vocabulary {actual:016x}")]
    VocabMismatch { expected: u64, actual: u64 },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_good: Box<crate::model::PointerModel>,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure inside the
    /// program. A missing input file counts as bad input.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::NonFiniteLoss { .. } => false,
            _ => true,
        }
    }
}

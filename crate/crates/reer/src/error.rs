//! Crate error types.

use thiserror::Error;

/// Transport-level failures from completion backends.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Network / IO failure after exhausting the retry budget.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// The reply arrived but violated the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Echoed text differs from the submitted prompt.
    #[error("truncation: echoed text does not match the submitted prompt")]
    Truncation,

    /// Scripted backend has no reply for this request.
    #[error("no scripted fixture for request hash {hash}")]
    MissingFixture { hash: String },

    /// The backend cannot serve this request shape.
    #[error("unsupported request: {0}")]
    Unsupported(String),

    #[error("backend io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One partially scored candidate, surfaced when a step fails mid-way.
#[derive(Debug, Clone)]
pub struct PartialScore {
    /// Position of the candidate within its set.
    pub ordinal: usize,
    pub ppl: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    // ── trajectory ──────────────────────────────────────────────
    #[error("input text is empty after trimming")]
    EmptyInput,
    #[error("segment index {index} out of range for trajectory of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("replacement text is empty after normalization")]
    EmptyReplacement,
    #[error("invalid pair {id:?}: {reason}")]
    InvalidPair { id: String, reason: String },

    // ── scoring ─────────────────────────────────────────────────
    #[error("logprob list is empty")]
    EmptyLogprobs,
    #[error("invalid logprob at index {index}: {value} (must be finite and <= 0)")]
    InvalidLogprob { index: usize, value: f64 },
    #[error("corpus has {len} characters, shorter than n-gram order {order}")]
    CorpusTooShort { len: usize, order: usize },
    #[error("n-gram order must be >= 1")]
    InvalidOrder,
    #[error("solution text is empty")]
    EmptySolution,
    #[error("scoring reply covers no solution tokens")]
    NoSolutionTokens,

    // ── templates ───────────────────────────────────────────────
    #[error("template {template:?} has no placeholder {name:?}")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template:?} contains unbound placeholder {name:?}")]
    UnboundPlaceholder { template: String, name: String },
    #[error("template asset {name:?} not found at {path}")]
    MissingAsset { name: String, path: String },

    // ── generation ──────────────────────────────────────────────
    #[error("generator returned no usable text")]
    EmptyGeneration,
    #[error("search initialization failed: {0}")]
    Initialization(Box<Error>),

    // ── search ──────────────────────────────────────────────────
    #[error("scoring failed at segment {index} after {} candidate(s): {source}", partial.len())]
    StepFailed {
        index: usize,
        partial: Vec<PartialScore>,
        source: Box<Error>,
    },

    // ── dataset ─────────────────────────────────────────────────
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("requested {requested} {source_name} records but only {available} available")]
    InsufficientRecords {
        requested: usize,
        available: usize,
        source_name: String,
    },
    #[error("record {id:?} failed filter {filter}")]
    FilterFailed { id: String, filter: String },
    #[error("field {field:?} is empty")]
    EmptyField { field: String },
    #[error("field {field:?} contains reserved marker {marker:?}")]
    MarkerCollision { field: String, marker: String },
    #[error("quality report is missing field {field:?}")]
    MissingReportField { field: String },
    #[error("quality report field {field:?} has out-of-range score {value}")]
    ScoreOutOfRange { field: String, value: i64 },
    #[error("no JSON object found in quality report")]
    MissingReportJson,
    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { found: String, expected: String },

    // ── passthrough ─────────────────────────────────────────────
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

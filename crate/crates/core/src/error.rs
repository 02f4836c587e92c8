//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // Domain
    #[error("gold label {0:?} is outside the threat model (only supported/refuted claims are targetable)")]
    InvalidGoldLabel(crate::domain::VeracityLabel),
    #[error("{0} must be non-empty")]
    EmptyText(&'static str),

    // Retrieval
    #[error("embedding contains a non-finite value")]
    NonFiniteEmbedding,
    #[error("embedding dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate evidence id {0:?} in knowledge base")]
    DuplicateEvidenceId(String),
    #[error("poison evidence id {0:?} collides with an existing knowledge-base id")]
    PoisonIdCollision(String),
    #[error("poison evidence {0:?} does not have malicious provenance")]
    PoisonNotMalicious(String),

    // LLM gateway
    #[error("template {template}: missing required slots: {slots:?}")]
    MissingSlots { template: &'static str, slots: Vec<String> },
    #[error("backend transport error (retriable): {0}")]
    Transport(String),
    #[error("backend rate-limited (retriable)")]
    RateLimited,
    #[error("malformed backend reply: {0}")]
    MalformedReply(String),
    #[error("backend rejected the request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("cannot parse {schema} payload: {reason}; raw: {raw:?}")]
    JsonPayload { schema: &'static str, reason: String, raw: String },

    // Victims
    #[error("no VERDICT sentinel found in completion: {0:?}")]
    VerdictParse(String),
    #[error("decomposition produced no questions")]
    NoQuestions,
    #[error("answer plan returned {got} answers for {expected} questions")]
    AnswerCountMismatch { expected: usize, got: usize },

    // Defenses
    #[error("k-means requires at least 2 vectors, got {0}")]
    TooFewVectors(usize),

    // Experiment harness
    #[error("dataset schema violation in {file} (line {line}): {reason}")]
    DatasetSchema { file: String, line: usize, reason: String },
    #[error("metrics require a non-empty result set")]
    EmptyResults,
    #[error("paired bootstrap requires equal-length vectors of length >= 2 (got {a} and {b})")]
    BootstrapInput { a: usize, b: usize },
    #[error("paired bootstrap requires at least 1000 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("experiment aborted: {failed} of {total} claims failed (> 10% tolerated)")]
    TooManyClaimFailures { failed: usize, total: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("claim {claim_id}: {source}")]
    Claim {
        claim_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn for_claim(claim_id: impl Into<String>, source: Error) -> Self {
        Error::Claim { claim_id: claim_id.into(), source: Box::new(source) }
    }

    /// Transient backend failures that a client may retry.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::RateLimited)
    }
}

//! Error type shared across the workbench.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: malformed JSON: {msg}")]
    JsonLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("cannot encode an empty token sequence")]
    EmptySequence,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("vocabulary size mismatch: encoder expects {expected}, corpus yields {got}")]
    VocabMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("no hard negative exists for question {qid}: every passage contains an answer")]
    NoHardNegative { qid: u32 },

    #[error("{count} training pairs lack a positive passage (first qids: {first:?})")]
    MissingPositives { count: usize, first: Vec<u32> },

    #[error("{count} training pairs lack a hard negative (first qids: {first:?})")]
    MissingHardNegatives { count: usize, first: Vec<u32> },

    #[error("non-finite value in score matrix")]
    NonFiniteScore,

    #[error("contradictory configuration: {0}")]
    ConfigContradiction(String),

    #[error("index fingerprint {index:#018x} does not match passage encoder {encoder:#018x}")]
    FingerprintMismatch { index: u64, encoder: u64 },

    #[error("no template for relation {0:?}")]
    UnknownRelation(String),

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("only {have} passage groups qualify, {need} requested")]
    NotEnoughGroups { have: usize, need: usize },

    #[error("evaluation requires at least one question")]
    EmptyEval,
}

pub type Result<T> = std::result::Result<T, Error>;

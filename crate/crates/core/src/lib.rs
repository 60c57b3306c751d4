//! retlab-core: a desk-scale passage-retrieval research workbench.
//!
//! The crate pairs two retrieval families over one corpus model:
//!
//! * **Sparse** — TF-IDF and BM25 over an inverted index
//!   ([`sparse`]), with scalar per-passage scorers kept alongside the
//!   index-driven search path so the two routes can be checked against
//!   each other.
//! * **Dense** — a deterministic dual encoder ([`encoder`]) trained with
//!   contrastive objectives ([`training`]) and searched by exact inner
//!   product ([`index`]).
//!
//! Supporting modules: corpus segmentation and tokenization ([`corpus`]),
//! question-set tooling — templates, splits, entity/relation subsets,
//! grouped question filtering, word-shuffle ablations — ([`datasets`]),
//! answer-containment evaluation ([`eval`]), finite-difference gradient
//! verification ([`gradcheck`]), and a seeded synthetic fact world for
//! end-to-end runs ([`synth`]).
//!
//! Everything is deterministic for a fixed seed: random draws come from
//! named ChaCha8 streams, summation orders are fixed, and artifacts
//! round-trip bitwise.

pub mod corpus;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod index;
pub mod linalg;
pub mod sparse;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

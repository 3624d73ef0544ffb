//! Label-free dense retriever training for multi-hop question answering.
//!
//! The library couples an iterative retrieve/answer/reformulate QA loop with
//! a trainer that distills a language model's per-document scores into a
//! query-side projection over frozen embeddings. Main pieces:
//!
//! - [`corpus`] / [`embeddings`]: documents, QA instances, and frozen
//!   embedding matrices with their on-disk formats
//! - [`index`]: exact top-k dot-product retrieval with exclusion sets
//! - [`lm`]: gateway to a scoring/generation language model (HTTP backend
//!   plus a deterministic scripted backend for offline runs)
//! - [`labeler`]: turns LM log-probabilities over candidate documents into
//!   a soft target distribution, and re-ranks candidate lists
//! - [`trainer`]: KL-divergence and InfoNCE training of the query projection
//! - [`orchestrator`]: the iterative QA loop and its trace format
//! - [`eval`]: answer and retrieval metrics over trace files

pub mod corpus;
pub mod embedder;
pub mod embeddings;
pub mod eval;
pub mod index;
pub mod labeler;
pub mod lm;
pub mod orchestrator;
pub mod prompts;
pub mod trainer;

use thiserror::Error;

/// Errors from loading or persisting corpora, QA sets, and matrices.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Malformed {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    #[error("qa instance {qa_id:?} references unknown document {doc_id:?}")]
    UnresolvedId { qa_id: String, doc_id: String },
    #[error("bad magic in {path}: expected {expected:?}, got {got:?}")]
    BadMagic {
        path: String,
        expected: String,
        got: String,
    },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: String, what: String },
    #[error("invalid data: {what}")]
    Invalid { what: String },
}

pub use corpus::{answer_read_count, load_corpus, load_qa, save_corpus, save_qa, Corpus, Document, QaInstance};
pub use embeddings::{export_embeddings, import_embeddings, EmbeddingStore};
pub use index::{EmbeddingIndex, IndexError, QueryVector, ScoredHit};

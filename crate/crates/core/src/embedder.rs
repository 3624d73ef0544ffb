//! Query-text embedding: turning (possibly reformulated) query strings into
//! base vectors. Documents are never embedded here; their vectors are
//! imported frozen.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embeddings::EmbeddingStore;
use crate::index::QueryVector;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no embedding known for query text {0:?}")]
    UnknownText(String),
    #[error("embedding endpoint returned dim {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
}

pub trait QueryEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<QueryVector, EmbedError>;
    fn dim(&self) -> usize;
}

/// HTTP embedder: POST `{input: [text]}` to the endpoint, read
/// `{embeddings: [[floats]]}`.
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Backend(format!("client build failed: {e}")))?;
        Ok(Self {
            url: url.into(),
            dim,
            client,
        })
    }
}

impl QueryEmbedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<QueryVector, EmbedError> {
        let body = EmbedBody { input: vec![text] };
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| EmbedError::Transport(format!("POST {}: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Backend(format!("{} returned {status}", self.url)));
        }
        let parsed: EmbedResponse = resp
            .json()
            .map_err(|e| EmbedError::Backend(format!("bad embedding response: {e}")))?;
        let vector = parsed
            .embeddings
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Backend("empty embeddings array".into()))?;
        if vector.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                got: vector.len(),
                expected: self.dim,
            });
        }
        Ok(QueryVector::new(vector))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Embedder backed by a precomputed store whose row ids are the exact query
/// strings. Unknown text is a hard error, not an approximation.
pub struct LookupEmbedder {
    store: EmbeddingStore,
}

impl LookupEmbedder {
    pub fn new(store: EmbeddingStore) -> Self {
        Self { store }
    }
}

impl QueryEmbedder for LookupEmbedder {
    fn embed(&self, text: &str) -> Result<QueryVector, EmbedError> {
        self.store
            .vector(text)
            .map(|v| QueryVector::new(v.to_vec()))
            .ok_or_else(|| EmbedError::UnknownText(text.to_string()))
    }

    fn dim(&self) -> usize {
        self.store.dim()
    }
}

/// Deterministic pseudo-random unit vector from a text hash; lets fully
/// offline runs embed any string reproducibly.
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self { dim, seed }
    }
}

impl QueryEmbedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<QueryVector, EmbedError> {
        let mut values = Vec::with_capacity(self.dim);
        let mut counter = 0u32;
        let mut hasher_base = Sha256::new();
        hasher_base.update(self.seed.to_le_bytes());
        hasher_base.update(text.as_bytes());
        while values.len() < self.dim {
            let mut hasher = hasher_base.clone();
            hasher.update(counter.to_le_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(8) {
                if values.len() == self.dim {
                    break;
                }
                let bits = u64::from_le_bytes(chunk.try_into().unwrap());
                // map to (-1, 1)
                let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
                values.push((unit * 2.0 - 1.0) as f32);
            }
            counter += 1;
        }
        let norm: f64 = values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(QueryVector::new(values))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Content-hash cache in front of any embedder. Concurrent reads; identical
/// keys overwrite with identical values, so last-write-wins is benign.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: RwLock<HashMap<[u8; 32], QueryVector>>,
}

impl<E: QueryEmbedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn key(text: &str) -> [u8; 32] {
        Sha256::digest(text.as_bytes()).into()
    }
}

impl<E: QueryEmbedder> QueryEmbedder for CachingEmbedder<E> {
    fn embed(&self, text: &str) -> Result<QueryVector, EmbedError> {
        let key = Self::key(text);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let vector = self.inner.embed(text)?;
        self.cache.write().expect("cache lock").insert(key, vector.clone());
        Ok(vector)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

//! Language model gateway: continuation scoring and text generation.
//!
//! Two backends implement [`LmBackend`]: an HTTP client for an
//! OpenAI-compatible server ([`http::HttpBackend`]) and a deterministic
//! scripted backend driven by a program file ([`scripted::ScriptedBackend`]).
//! [`Gateway`] wraps a backend with retry and fan-out policy.

pub mod http;
pub mod scripted;

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    /// Network-level failure; the only retryable class.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The backend answered but the response is unusable.
    #[error("backend error: {0}")]
    Backend(String),
    /// Token offsets do not align with the condition/continuation split.
    #[error("tokenization boundary misaligned: {0}")]
    BoundaryMisaligned(String),
    /// The scripted program has no entry for this interaction.
    #[error("scripted program exhausted or mismatched: {0}")]
    ProgramExhausted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// Batch element `index` failed.
    #[error("batch element {index} failed: {source}")]
    BatchElement {
        index: usize,
        #[source]
        source: Box<LmError>,
    },
}

impl LmError {
    pub fn is_transport(&self) -> bool {
        matches!(self, LmError::Transport(_))
    }
}

/// Ask for the log-probability of `continuation` given `condition`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreRequest {
    pub condition: String,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn new(condition: impl Into<String>, continuation: impl Into<String>) -> Self {
        Self {
            condition: condition.into(),
            continuation: continuation.into(),
        }
    }

    /// The full text as the model sees it.
    pub fn transcript(&self) -> String {
        format!("{}{}", self.condition, self.continuation)
    }
}

/// Sum of token log-probabilities over the continuation span.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub log_prob: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature,
        }
    }
}

/// A scoring/generation model. Implementations must be thread-safe; score
/// must be referentially transparent for fixed backend state.
pub trait LmBackend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, LmError>;
    fn generate(&self, req: &GenerateRequest) -> Result<String, LmError>;

    /// Cheap reachability probe; used to fail fast before long runs.
    fn ping(&self) -> Result<(), LmError> {
        Ok(())
    }
}

/// Retry/backoff and fan-out policy around a backend.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LmBackend>,
    retries: usize,
    backoff: Vec<Duration>,
    in_flight: usize,
    max_tokens_limit: usize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LmBackend>) -> Self {
        Self {
            backend,
            retries: 3,
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
            in_flight: 8,
            max_tokens_limit: 4096,
        }
    }

    pub fn with_max_tokens_limit(mut self, limit: usize) -> Self {
        self.max_tokens_limit = limit.max(1);
        self
    }

    pub fn with_retries(mut self, retries: usize, backoff: Vec<Duration>) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn with_in_flight(mut self, cap: usize) -> Self {
        self.in_flight = cap.max(1);
        self
    }

    pub fn ping(&self) -> Result<(), LmError> {
        self.backend.ping()
    }

    fn with_retry<T>(&self, mut call: impl FnMut() -> Result<T, LmError>) -> Result<T, LmError> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transport() && attempt < self.retries => {
                    let wait = self
                        .backoff
                        .get(attempt)
                        .copied()
                        .or_else(|| self.backoff.last().copied())
                        .unwrap_or(Duration::ZERO);
                    log::warn!("transport failure (attempt {}): {e}; retrying in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, LmError> {
        if req.continuation.is_empty() {
            return Err(LmError::InvalidRequest("continuation must be nonempty".into()));
        }
        self.with_retry(|| self.backend.score(req))
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<String, LmError> {
        if req.max_tokens == 0 {
            return Err(LmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if req.max_tokens > self.max_tokens_limit {
            return Err(LmError::InvalidRequest(format!(
                "max_tokens {} exceeds the backend limit {}",
                req.max_tokens, self.max_tokens_limit
            )));
        }
        if req.temperature < 0.0 {
            return Err(LmError::InvalidRequest("temperature must be >= 0".into()));
        }
        self.with_retry(|| self.backend.generate(req))
    }

    /// Score a batch, fanning out up to the in-flight cap. Results come
    /// back in request order and equal element-wise sequential calls; any
    /// element failure fails the batch with its index.
    pub fn score_batch(&self, reqs: &[ScoreRequest]) -> Result<Vec<ScoreResult>, LmError> {
        if self.in_flight == 1 {
            return reqs
                .iter()
                .enumerate()
                .map(|(index, req)| {
                    self.score(req).map_err(|e| LmError::BatchElement {
                        index,
                        source: Box::new(e),
                    })
                })
                .collect();
        }
        let mut results: Vec<Option<Result<ScoreResult, LmError>>> = Vec::new();
        results.resize_with(reqs.len(), || None);

        for (chunk_start, chunk) in reqs.chunks(self.in_flight).enumerate().map(|(i, c)| (i * self.in_flight, c)) {
            if chunk.len() == 1 {
                results[chunk_start] = Some(self.score(&chunk[0]));
                continue;
            }
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|req| scope.spawn(move || self.score(req)))
                    .collect();
                for (offset, handle) in handles.into_iter().enumerate() {
                    results[chunk_start + offset] = Some(handle.join().expect("score worker panicked"));
                }
            });
        }

        results
            .into_iter()
            .enumerate()
            .map(|(index, slot)| {
                slot.expect("all slots filled").map_err(|e| LmError::BatchElement {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

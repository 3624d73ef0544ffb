//! Assembling runtime components from a RunConfig, with the exit-code
//! discipline: 2 missing input, 3 validation, 4 gateway, 5 eval mismatch,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rescore::corpus::{load_corpus, load_qa, Corpus, QaInstance};
use rescore::embedder::{CachingEmbedder, HashingEmbedder, HttpEmbedder, LookupEmbedder, QueryEmbedder};
use rescore::embeddings::{import_embeddings, read_matrix_file, EmbeddingStore, EMBEDDING_MAGIC};
use rescore::index::EmbeddingIndex;
use rescore::lm::http::{HttpBackend, HttpConfig};
use rescore::lm::scripted::ScriptedBackend;
use rescore::lm::Gateway;
use rescore::prompts::PromptTemplates;

use crate::config::RunConfig;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_GATEWAY: i32 = 4;
pub const EXIT_EVAL_MISMATCH: i32 = 5;

/// Error with an exit code attached.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn missing(path: &Path) -> Self {
        Self::new(EXIT_MISSING_INPUT, format!("missing input: {}", path.display()))
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, message)
    }

    pub fn gateway(message: impl Into<String>) -> Self {
        Self::new(EXIT_GATEWAY, message)
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn require_set(value: &str, what: &str) -> Result<(), CliError> {
    if value.is_empty() {
        Err(CliError::validation(format!("config: {what} is not set")))
    } else {
        Ok(())
    }
}

pub struct Workspace {
    pub corpus: Corpus,
    pub store: Arc<EmbeddingStore>,
    pub index: EmbeddingIndex,
}

/// Load corpus and embeddings and require the id sets to match exactly.
pub fn load_workspace(config: &RunConfig, base: Option<&Path>) -> Result<Workspace, CliError> {
    require_set(&config.paths.corpus, "paths.corpus")?;
    require_set(&config.paths.embeddings, "paths.embeddings")?;
    let corpus_path = config.resolve(base, &config.paths.corpus);
    let embed_path = config.resolve(base, &config.paths.embeddings);
    require_file(&corpus_path)?;
    require_file(&embed_path)?;

    let corpus = load_corpus(&corpus_path)
        .map_err(|e| CliError::validation(format!("corpus: {e}")))?;
    let store = import_embeddings(&embed_path)
        .map_err(|e| CliError::validation(format!("embeddings: {e}")))?;

    let missing_embeddings: Vec<&str> = corpus
        .ids()
        .filter(|id| store.vector(id).is_none())
        .take(10)
        .collect();
    let missing_docs: Vec<&str> = store
        .ids()
        .iter()
        .map(String::as_str)
        .filter(|id| !corpus.contains(id))
        .take(10)
        .collect();
    if !missing_embeddings.is_empty() || !missing_docs.is_empty() {
        let mut message = String::from("corpus/embedding id mismatch.");
        if !missing_embeddings.is_empty() {
            message.push_str(&format!(" docs without embeddings (first 10): {missing_embeddings:?}."));
        }
        if !missing_docs.is_empty() {
            message.push_str(&format!(" embeddings without docs (first 10): {missing_docs:?}."));
        }
        return Err(CliError::validation(message));
    }

    let store = Arc::new(store);
    let index = EmbeddingIndex::new(store.clone());
    Ok(Workspace { corpus, store, index })
}

pub fn load_qa_file(path: &Path, corpus: Option<&Corpus>) -> Result<Vec<QaInstance>, CliError> {
    require_file(path)?;
    load_qa(path, corpus).map_err(|e| CliError::validation(format!("qa: {e}")))
}

pub fn build_gateway(config: &RunConfig, base: Option<&Path>) -> Result<Gateway, CliError> {
    let gw = &config.gateway;
    let backend: Arc<dyn rescore::lm::LmBackend> = match gw.backend.as_str() {
        "http" => {
            require_set(&gw.lm_url, "gateway.lm_url (or RESCORE_LM_URL)")?;
            require_set(&gw.lm_model, "gateway.lm_model (or RESCORE_LM_MODEL)")?;
            let mut http = HttpConfig::new(&gw.lm_url, &gw.lm_model);
            http.timeout = Duration::from_secs(gw.timeout_secs);
            if !gw.lm_token.is_empty() {
                http = http.with_token(Some(gw.lm_token.clone()));
            }
            Arc::new(HttpBackend::new(http).map_err(|e| CliError::gateway(e.to_string()))?)
        }
        "scripted" => {
            require_set(&gw.program, "gateway.program")?;
            let program = config.resolve(base, &gw.program);
            require_file(&program)?;
            Arc::new(
                ScriptedBackend::from_program_file(&program)
                    .map_err(|e| CliError::validation(format!("program: {e}")))?,
            )
        }
        other => {
            return Err(CliError::validation(format!(
                "gateway.backend must be \"http\" or \"scripted\", got {other:?}"
            )));
        }
    };
    let backoff: Vec<Duration> = [500u64, 1000, 2000]
        .iter()
        .take(gw.retries)
        .map(|ms| Duration::from_millis(*ms))
        .collect();
    Ok(Gateway::new(backend)
        .with_retries(gw.retries, backoff)
        .with_in_flight(gw.in_flight))
}

pub fn build_embedder(
    config: &RunConfig,
    base: Option<&Path>,
    store_dim: usize,
) -> Result<Arc<dyn QueryEmbedder>, CliError> {
    let e = &config.embedder;
    let embedder: Arc<dyn QueryEmbedder> = match e.kind.as_str() {
        "http" => {
            require_set(&e.embed_url, "embedder.embed_url (or RESCORE_EMBED_URL)")?;
            let dim = if e.dim > 0 { e.dim } else { store_dim };
            Arc::new(CachingEmbedder::new(
                HttpEmbedder::new(&e.embed_url, dim).map_err(|err| CliError::gateway(err.to_string()))?,
            ))
        }
        "lookup" => {
            require_set(&e.path, "embedder.path")?;
            let path = config.resolve(base, &e.path);
            require_file(&path)?;
            let (dim, ids, matrix) = read_matrix_file(&path, EMBEDDING_MAGIC)
                .map_err(|err| CliError::validation(format!("query embeddings: {err}")))?;
            let store = EmbeddingStore::new(dim, ids, matrix)
                .map_err(|err| CliError::validation(format!("query embeddings: {err}")))?;
            Arc::new(LookupEmbedder::new(store))
        }
        "hashing" => {
            let dim = if e.dim > 0 { e.dim } else { store_dim };
            Arc::new(CachingEmbedder::new(HashingEmbedder::new(dim, e.hash_seed)))
        }
        other => {
            return Err(CliError::validation(format!(
                "embedder.kind must be http, lookup, or hashing, got {other:?}"
            )));
        }
    };
    if embedder.dim() != store_dim {
        return Err(CliError::validation(format!(
            "embedder dim {} does not match document embedding dim {store_dim}",
            embedder.dim()
        )));
    }
    Ok(embedder)
}

pub fn load_templates(config: &RunConfig, base: Option<&Path>) -> Result<PromptTemplates, CliError> {
    if config.paths.templates.is_empty() {
        return Ok(PromptTemplates::default());
    }
    let dir = config.resolve(base, &config.paths.templates);
    if !dir.is_dir() {
        return Err(CliError::missing(&dir));
    }
    PromptTemplates::load_dir(&dir).map_err(|e| CliError::validation(format!("templates: {e}")))
}

/// Checkpoint file path inside the configured checkpoint directory.
pub fn checkpoint_path(config: &RunConfig, base: Option<&Path>) -> PathBuf {
    let dir = if config.paths.checkpoints.is_empty() {
        PathBuf::from("checkpoints")
    } else {
        config.resolve(base, &config.paths.checkpoints)
    };
    dir.join("projection.rscp")
}

pub fn traces_path(config: &RunConfig, base: Option<&Path>) -> PathBuf {
    let dir = if config.paths.traces.is_empty() {
        PathBuf::from("traces")
    } else {
        config.resolve(base, &config.paths.traces)
    };
    dir.join("traces.jsonl")
}

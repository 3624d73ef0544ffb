//! The iterative QA loop: retrieve, answer or defer, distill a thought,
//! reformulate, repeat.
//!
//! Each iteration retrieves only documents not seen in earlier iterations.
//! An answer of "unknown" defers: the model produces a one-sentence thought
//! over the retrieved documents, the query is reformulated, and the loop
//! continues. Early answers below the minimum iteration count are recorded
//! but overridden. At the iteration cap the answer attempt is final: its
//! text, or the literal "unknown", becomes the trace's final answer.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document, QaInstance};
use crate::embedder::EmbedError;
use crate::index::{EmbeddingIndex, IndexError, QueryVector, ScoredHit};
use crate::lm::{Gateway, GenerateRequest, LmError};
use crate::prompts::{render, render_documents, render_hints, PromptError, PromptTemplates};
use crate::trainer::TrainerConfig;

pub const TRACE_SCHEMA: &str = "trace_v1";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("retrieved document {0:?} missing from corpus")]
    UnknownDocument(String),
    #[error("trace file error: {0}")]
    TraceFile(String),
    /// The loop died mid-instance; completed iterations are preserved.
    #[error("run aborted for {instance_id} at iteration {at}: {source}")]
    Aborted {
        instance_id: String,
        at: usize,
        iterations: Vec<IterationState>,
        #[source]
        source: Box<RunError>,
    },
}

/// How the next query is produced after a deferred answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReformulationMode {
    /// Keep the original question at every iteration.
    None,
    /// Ask the model to write a follow-up question targeting what is
    /// still missing.
    LlmRewrite,
    /// Prefix the latest thought onto the current query.
    ThoughtConcat,
}

/// Outcome of one answer attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerOutcome {
    Answer(String),
    Unknown,
}

/// One loop iteration as recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub index: usize,
    pub query: String,
    pub retrieved: Vec<String>,
    pub scores: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Answer,
    MaxIterations,
}

/// Full record of one instance's run through the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub schema: String,
    pub instance_id: String,
    pub iterations: Vec<IterationState>,
    pub final_answer: String,
    pub terminated_by: TerminatedBy,
}

/// Ties the loop together over shared read-only components.
pub struct Orchestrator<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a EmbeddingIndex,
    pub gateway: &'a Gateway,
    pub templates: &'a PromptTemplates,
    /// Generation cap per call.
    pub max_tokens: usize,
    /// Generation temperature; zero for reproducible decoding.
    pub gen_temperature: f64,
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        corpus: &'a Corpus,
        index: &'a EmbeddingIndex,
        gateway: &'a Gateway,
        templates: &'a PromptTemplates,
    ) -> Self {
        Self {
            corpus,
            index,
            gateway,
            templates,
            max_tokens: 64,
            gen_temperature: 0.0,
        }
    }

    fn generate(&self, prompt: String) -> Result<String, RunError> {
        let req = GenerateRequest::new(prompt, self.max_tokens, self.gen_temperature);
        Ok(self.gateway.generate(&req)?)
    }

    /// Generate and extract a JSON string field, with one regeneration
    /// retry before giving up.
    fn generate_field(&self, prompt: &str, field: &str) -> Result<Option<String>, RunError> {
        for attempt in 0..2 {
            let raw = self.generate(prompt.to_string())?;
            if let Some(value) = extract_json_field(&raw, field) {
                return Ok(Some(value));
            }
            log::warn!("attempt {attempt}: could not extract {field:?} from model output {raw:?}");
        }
        Ok(None)
    }

    /// One answer attempt over the retrieved documents and accumulated
    /// thoughts. Unparseable output degrades to Unknown rather than
    /// crashing the run.
    pub fn answer_step(
        &self,
        question: &str,
        docs: &[&Document],
        thoughts: &[String],
    ) -> Result<AnswerOutcome, RunError> {
        let rendered_docs = render_documents(docs);
        let rendered_hints = render_hints(thoughts);
        let values: BTreeMap<&str, &str> = [
            ("documents", rendered_docs.as_str()),
            ("question", question),
            ("hints", rendered_hints.as_str()),
        ]
        .into();
        let prompt = render("answer", &self.templates.answer, &values)?;
        match self.generate_field(&prompt, "answer")? {
            Some(text) => {
                let trimmed = text.trim();
                if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("unknown") {
                    Ok(AnswerOutcome::Unknown)
                } else {
                    Ok(AnswerOutcome::Answer(trimmed.to_string()))
                }
            }
            None => Ok(AnswerOutcome::Unknown),
        }
    }

    /// Distill the retrieved documents into a one-sentence hint.
    /// Unparseable output becomes an empty thought.
    pub fn thought_step(
        &self,
        question: &str,
        docs: &[&Document],
        thoughts: &[String],
    ) -> Result<String, RunError> {
        let rendered_docs = render_documents(docs);
        let rendered_hints = render_hints(thoughts);
        let values: BTreeMap<&str, &str> = [
            ("documents", rendered_docs.as_str()),
            ("question", question),
            ("hints", rendered_hints.as_str()),
        ]
        .into();
        let prompt = render("thought", &self.templates.thought, &values)?;
        match self.generate_field(&prompt, "hint")? {
            Some(hint) => Ok(hint.trim().to_string()),
            None => {
                log::warn!("thought generation unparseable; using empty thought");
                Ok(String::new())
            }
        }
    }

    /// Produce the next query. A rewrite that cannot be parsed falls back
    /// to thought concatenation.
    pub fn reformulate(
        &self,
        mode: ReformulationMode,
        current_query: &str,
        original_question: &str,
        thought: &str,
        docs: &[&Document],
    ) -> Result<String, RunError> {
        match mode {
            ReformulationMode::None => Ok(original_question.to_string()),
            ReformulationMode::ThoughtConcat => Ok(concat_thought(thought, current_query)),
            ReformulationMode::LlmRewrite => {
                let rendered_docs = render_documents(docs);
                let values: BTreeMap<&str, &str> = [
                    ("documents", rendered_docs.as_str()),
                    ("question", current_query),
                ]
                .into();
                let prompt = render("rewrite", &self.templates.rewrite, &values)?;
                match self.generate_field(&prompt, "question")? {
                    Some(next) if !next.trim().is_empty() => Ok(next.trim().to_string()),
                    _ => {
                        log::warn!("rewrite unparseable; falling back to thought concatenation");
                        Ok(concat_thought(thought, current_query))
                    }
                }
            }
        }
    }

    /// Run the full loop for one instance. `embed` maps query text to the
    /// (already projected) retrieval vector.
    pub fn run(
        &self,
        instance: &QaInstance,
        cfg: &TrainerConfig,
        mode: ReformulationMode,
        embed: &dyn Fn(&str) -> Result<QueryVector, RunError>,
    ) -> Result<RetrievalTrace, RunError> {
        let original = instance.question.as_str();
        let mut thoughts: Vec<String> = Vec::new();
        let mut excluded: HashSet<String> = HashSet::new();
        let mut iterations: Vec<IterationState> = Vec::new();
        let mut query = original.to_string();

        let abort = |at: usize, iterations: Vec<IterationState>, source: RunError| RunError::Aborted {
            instance_id: instance.id.clone(),
            at,
            iterations,
            source: Box::new(source),
        };

        for i in 1..=cfg.max_iterations {
            let step = (|| -> Result<(Vec<ScoredHit>, Vec<&Document>), RunError> {
                let qvec = embed(&query)?;
                let hits = self.index.search_top_k(&qvec, cfg.top_k, &excluded)?;
                let docs = hits
                    .iter()
                    .map(|h| {
                        self.corpus
                            .get(&h.doc_id)
                            .ok_or_else(|| RunError::UnknownDocument(h.doc_id.clone()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((hits, docs))
            })();
            let (hits, docs) = match step {
                Ok(v) => v,
                Err(e) => return Err(abort(i, iterations, e)),
            };

            let mut state = IterationState {
                index: i,
                query: query.clone(),
                retrieved: hits.iter().map(|h| h.doc_id.clone()).collect(),
                scores: hits.iter().map(|h| h.score).collect(),
                thought: None,
                answer: None,
            };
            excluded.extend(state.retrieved.iter().cloned());

            let outcome = match self.answer_step(original, &docs, &thoughts) {
                Ok(v) => v,
                Err(e) => return Err(abort(i, iterations, e)),
            };

            if let AnswerOutcome::Answer(text) = &outcome {
                state.answer = Some(text.clone());
                if i >= cfg.min_iterations {
                    iterations.push(state);
                    return Ok(RetrievalTrace {
                        schema: TRACE_SCHEMA.to_string(),
                        instance_id: instance.id.clone(),
                        iterations,
                        final_answer: text.clone(),
                        terminated_by: TerminatedBy::Answer,
                    });
                }
                // below the minimum: recorded, overridden, loop continues
            }

            if i == cfg.max_iterations {
                // the cap makes this attempt final; unknown stays unknown
                iterations.push(state);
                return Ok(RetrievalTrace {
                    schema: TRACE_SCHEMA.to_string(),
                    instance_id: instance.id.clone(),
                    iterations,
                    final_answer: "unknown".to_string(),
                    terminated_by: TerminatedBy::MaxIterations,
                });
            }

            let thought = match self.thought_step(original, &docs, &thoughts) {
                Ok(t) => t,
                Err(e) => return Err(abort(i, iterations, e)),
            };
            state.thought = Some(thought.clone());
            iterations.push(state);
            thoughts.push(thought);

            query = match self.reformulate(mode, &query, original, thoughts.last().unwrap(), &docs) {
                Ok(q) => q,
                Err(e) => return Err(abort(i, iterations, e)),
            };
        }
        unreachable!("loop always returns at or before max_iterations");
    }
}

fn concat_thought(thought: &str, query: &str) -> String {
    if thought.is_empty() {
        query.to_string()
    } else {
        format!("{thought} {query}")
    }
}

/// Extract a string field from model output: strict JSON parse first, then
/// the first balanced JSON object found in the text that parses and carries
/// the field.
pub fn extract_json_field(text: &str, field: &str) -> Option<String> {
    let try_parse = |candidate: &str| -> Option<String> {
        let value: serde_json::Value = serde_json::from_str(candidate).ok()?;
        value.get(field)?.as_str().map(str::to_string)
    };
    if let Some(v) = try_parse(text.trim()) {
        return Some(v);
    }
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(open) = text[start..].find('{').map(|o| o + start) {
        if let Some(end) = find_balanced_object(bytes, open) {
            if let Some(v) = try_parse(&text[open..=end]) {
                return Some(v);
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the brace closing the object opened at `open`, honoring JSON
/// string and escape rules.
fn find_balanced_object(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Append traces to a JSONL file, one per line.
pub fn append_traces(path: impl AsRef<Path>, traces: &[RetrievalTrace]) -> Result<(), RunError> {
    let path = path.as_ref();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| RunError::TraceFile(format!("{}: {e}", path.display())))?;
    let mut buf = String::new();
    for trace in traces {
        buf.push_str(&serde_json::to_string(trace).expect("trace serializes"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| RunError::TraceFile(format!("{}: {e}", path.display())))
}

/// Load a trace file, validating the schema tag.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<RetrievalTrace>, RunError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RunError::TraceFile(format!("{}: {e}", path.display())))?;
    let mut traces = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RunError::TraceFile(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: RetrievalTrace = serde_json::from_str(&line)
            .map_err(|e| RunError::TraceFile(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        if trace.schema != TRACE_SCHEMA {
            return Err(RunError::TraceFile(format!(
                "{}:{}: unsupported schema {:?}",
                path.display(),
                idx + 1,
                trace.schema
            )));
        }
        traces.push(trace);
    }
    Ok(traces)
}

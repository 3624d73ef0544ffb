//! Deterministic scripted backend for offline runs and tests.
//!
//! A program is an ordered list of entries, JSONL on disk:
//!
//! ```text
//! {"kind":"score","match":"substring","value":-1.5}
//! {"kind":"score","match_all":["doc-07","question-answer pair"],"value":-0.25}
//! {"kind":"generate","match":"","value":"{\"answer\": \"Unknown\"}","repeat":true}
//! ```
//!
//! Score entries form a persistent table: the first matching entry wins,
//! every time, so scoring stays referentially transparent. A configured
//! default covers unknown pairs; without one they are a hard error.
//!
//! Generate entries are consumed. Each call takes the first unconsumed
//! matching entry in program order; `repeat: true` marks an entry sticky.
//! A call with no matching entry left is a program-exhausted error, never a
//! made-up response.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{GenerateRequest, LmBackend, LmError, ScoreRequest, ScoreResult};

/// Substring or exact-string match against an interaction transcript.
#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Exact(String),
    /// Every pattern must appear as a substring.
    All(Vec<String>),
}

impl Matcher {
    pub fn substring(s: impl Into<String>) -> Self {
        Matcher::Substring(s.into())
    }

    pub fn exact(s: impl Into<String>) -> Self {
        Matcher::Exact(s.into())
    }

    pub fn all(parts: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Matcher::All(parts.into_iter().map(Into::into).collect())
    }

    pub fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::Exact(s) => text == s,
            Matcher::All(parts) => parts.iter().all(|p| text.contains(p.as_str())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Score,
    Generate,
}

#[derive(Debug, Clone)]
pub struct ProgramEntry {
    pub kind: EntryKind,
    pub matcher: Matcher,
    /// Log-probability for score entries (serialized as a JSON number).
    pub log_prob: f64,
    /// Response text for generate entries.
    pub response: String,
    pub repeat: bool,
}

impl ProgramEntry {
    pub fn score(matcher: Matcher, log_prob: f64) -> Self {
        Self {
            kind: EntryKind::Score,
            matcher,
            log_prob,
            response: String::new(),
            repeat: false,
        }
    }

    pub fn generate(matcher: Matcher, response: impl Into<String>) -> Self {
        Self {
            kind: EntryKind::Generate,
            matcher,
            log_prob: 0.0,
            response: response.into(),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

#[derive(Deserialize)]
struct RawEntry {
    kind: String,
    #[serde(rename = "match")]
    match_: Option<String>,
    match_all: Option<Vec<String>>,
    #[serde(default)]
    exact: bool,
    value: serde_json::Value,
    #[serde(default)]
    repeat: bool,
}

/// In-memory scripted model. Score lookups match against the concatenated
/// condition + continuation; generation matches against the prompt.
pub struct ScriptedBackend {
    entries: Vec<ProgramEntry>,
    consumed: Mutex<Vec<bool>>,
    default_score: Option<f64>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ProgramEntry>) -> Self {
        let consumed = Mutex::new(vec![false; entries.len()]);
        Self {
            entries,
            consumed,
            default_score: None,
        }
    }

    pub fn with_default_score(mut self, log_prob: f64) -> Self {
        self.default_score = Some(log_prob);
        self
    }

    /// Load a JSONL program file.
    pub fn from_program_file(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| LmError::Backend(format!("cannot open program {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        let mut default_score = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LmError::Backend(format!("program read error: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawEntry = serde_json::from_str(&line)
                .map_err(|e| LmError::Backend(format!("program line {}: {e}", idx + 1)))?;
            let matcher = match (raw.match_all, raw.match_) {
                (Some(parts), _) => Matcher::All(parts),
                (None, Some(s)) if raw.exact => Matcher::Exact(s),
                (None, Some(s)) => Matcher::Substring(s),
                (None, None) => Matcher::Substring(String::new()),
            };
            match raw.kind.as_str() {
                "score" => {
                    let v = raw.value.as_f64().ok_or_else(|| {
                        LmError::Backend(format!("program line {}: score value must be a number", idx + 1))
                    })?;
                    let mut entry = ProgramEntry::score(matcher, v);
                    entry.repeat = raw.repeat;
                    entries.push(entry);
                }
                "generate" => {
                    let v = raw.value.as_str().ok_or_else(|| {
                        LmError::Backend(format!("program line {}: generate value must be a string", idx + 1))
                    })?;
                    let mut entry = ProgramEntry::generate(matcher, v);
                    entry.repeat = raw.repeat;
                    entries.push(entry);
                }
                "score_default" => {
                    default_score = raw.value.as_f64();
                }
                other => {
                    return Err(LmError::Backend(format!(
                        "program line {}: unknown kind {other:?}",
                        idx + 1
                    )));
                }
            }
        }
        let mut backend = ScriptedBackend::new(entries);
        backend.default_score = default_score;
        Ok(backend)
    }

    fn approx_token_count(text: &str) -> usize {
        text.split_whitespace().count().max(1)
    }
}

impl LmBackend for ScriptedBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, LmError> {
        let transcript = req.transcript();
        for entry in &self.entries {
            if entry.kind == EntryKind::Score && entry.matcher.matches(&transcript) {
                return Ok(ScoreResult {
                    log_prob: entry.log_prob,
                    token_count: Self::approx_token_count(&req.continuation),
                });
            }
        }
        match self.default_score {
            Some(log_prob) => Ok(ScoreResult {
                log_prob,
                token_count: Self::approx_token_count(&req.continuation),
            }),
            None => Err(LmError::ProgramExhausted(format!(
                "no score entry matches continuation {:?}",
                truncate_for_log(&req.continuation)
            ))),
        }
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String, LmError> {
        let mut consumed = self.consumed.lock().expect("program lock");
        for (idx, entry) in self.entries.iter().enumerate() {
            if entry.kind != EntryKind::Generate || consumed[idx] {
                continue;
            }
            if entry.matcher.matches(&req.prompt) {
                if !entry.repeat {
                    consumed[idx] = true;
                }
                return Ok(entry.response.clone());
            }
        }
        Err(LmError::ProgramExhausted(format!(
            "no generate entry matches prompt {:?}",
            truncate_for_log(&req.prompt)
        )))
    }
}

fn truncate_for_log(s: &str) -> String {
    const LIMIT: usize = 120;
    if s.len() <= LIMIT {
        s.to_string()
    } else {
        let mut cut = LIMIT;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}…", &s[..cut])
    }
}

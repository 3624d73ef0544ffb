//! Document corpus and QA instance loading.
//!
//! Corpora and QA sets are UTF-8 JSONL, one record per line. Both are
//! immutable after load and safe to share across threads.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::StoreError;

/// One retrievable passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    /// Render the passage the way it is inserted into prompt `{documents}`
    /// slots: title line followed by the body.
    pub fn render(&self) -> String {
        format!("Title: {}\n{}", self.title, self.text)
    }
}

/// Counts every read of [`QaInstance::answer`]. Gold answers must only be
/// consumed by pseudo-label scoring; the audit test pins the exact count.
static ANSWER_READS: AtomicU64 = AtomicU64::new(0);

/// Total number of gold-answer reads since process start.
pub fn answer_read_count() -> u64 {
    ANSWER_READS.load(Ordering::Relaxed)
}

/// A question/answer pair, optionally labeled with its supporting documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub gt_doc_ids: BTreeSet<String>,
}

impl QaInstance {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
        gt_doc_ids: impl IntoIterator<Item = String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            gt_doc_ids: gt_doc_ids.into_iter().collect(),
        }
    }

    /// The gold answer. Every call is counted; see [`answer_read_count`].
    pub fn answer(&self) -> &str {
        ANSWER_READS.fetch_add(1, Ordering::Relaxed);
        &self.answer
    }
}

/// An ordered, validated document collection with id lookup.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, StoreError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (row, doc) in docs.iter().enumerate() {
            if doc.id.is_empty() {
                return Err(StoreError::Invalid {
                    what: format!("document at position {row} has an empty id"),
                });
            }
            if doc.text.is_empty() {
                return Err(StoreError::Invalid {
                    what: format!("document {:?} has empty text", doc.id),
                });
            }
            if by_id.insert(doc.id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId { id: doc.id.clone() });
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&row| &self.docs[row])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Documents in file order.
    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BufReader::new(file).lines())
}

/// Load a corpus from JSONL with fields `id`, `title`, `text`.
/// Line order is preserved; unknown fields are ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, StoreError> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|source| StoreError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?;
        docs.push(doc);
    }
    Corpus::from_documents(docs)
}

/// Write a corpus back out as JSONL in document order.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let io_err = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for doc in corpus.documents() {
        let line = serde_json::to_string(doc).expect("document serializes");
        out.write_all(line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Load QA instances from JSONL. When `corpus` is given, every gt doc id
/// must resolve against it.
pub fn load_qa(path: impl AsRef<Path>, corpus: Option<&Corpus>) -> Result<Vec<QaInstance>, StoreError> {
    let path = path.as_ref();
    let mut instances: Vec<QaInstance> = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: QaInstance = serde_json::from_str(&line).map_err(|source| StoreError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?;
        if inst.id.is_empty() || inst.question.is_empty() || inst.answer.is_empty() {
            return Err(StoreError::Invalid {
                what: format!("qa line {} must have nonempty id/question/answer", idx + 1),
            });
        }
        if let Some(prev) = seen.insert(inst.id.clone(), idx + 1) {
            return Err(StoreError::Invalid {
                what: format!("qa id {:?} repeated (lines {prev} and {})", inst.id, idx + 1),
            });
        }
        if let Some(corpus) = corpus {
            for gt in &inst.gt_doc_ids {
                if !corpus.contains(gt) {
                    return Err(StoreError::UnresolvedId {
                        qa_id: inst.id.clone(),
                        doc_id: gt.clone(),
                    });
                }
            }
        }
        instances.push(inst);
    }
    Ok(instances)
}

/// Write QA instances as JSONL in order.
pub fn save_qa(instances: &[QaInstance], path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let io_err = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("qa instance serializes");
        out.write_all(line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

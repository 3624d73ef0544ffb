//! Shared fixtures for the integration and acceptance suites.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rescore::corpus::{Corpus, Document, QaInstance};
use rescore::embedder::{EmbedError, QueryEmbedder};
use rescore::embeddings::EmbeddingStore;
use rescore::index::QueryVector;
use rescore::lm::{GenerateRequest, LmBackend, LmError, ScoreRequest, ScoreResult};

/// Standard normal via Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Random rotation from Gram-Schmidt over Gaussian rows.
pub fn random_rotation(rng: &mut impl Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            rows.push(v);
        }
    }
    rows
}

fn rotate(rotation: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    rotation
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// A planted-relevance world: each question has one target document whose
/// LM score dominates, and base query embeddings are the target document
/// embeddings pushed through a hidden rotation plus noise. A linear query
/// projection can undo the rotation; the identity projection retrieves
/// essentially at chance.
pub struct SyntheticTask {
    pub corpus: Corpus,
    pub store: Arc<EmbeddingStore>,
    pub train: Vec<QaInstance>,
    pub heldout: Vec<QaInstance>,
    /// question text -> target doc id
    pub target_by_question: HashMap<String, String>,
    /// question text -> base query embedding
    pub query_vectors: HashMap<String, Vec<f32>>,
    pub dim: usize,
}

pub fn doc_id(j: usize) -> String {
    format!("doc-{j:03}")
}

pub fn synthetic_task(seed: u64, n_docs: usize, dim: usize, n_train: usize, n_heldout: usize) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc_vectors: Vec<Vec<f64>> = (0..n_docs).map(|_| random_unit_vector(&mut rng, dim)).collect();
    let rotation = random_rotation(&mut rng, dim);

    let docs: Vec<Document> = (0..n_docs)
        .map(|j| Document {
            id: doc_id(j),
            title: format!("Topic {j:03}"),
            text: format!("Synthetic passage covering subject number {j:03}."),
        })
        .collect();
    let corpus = Corpus::from_documents(docs).unwrap();
    let matrix: Vec<f32> = doc_vectors.iter().flatten().map(|v| *v as f32).collect();
    let ids: Vec<String> = (0..n_docs).map(doc_id).collect();
    let store = Arc::new(EmbeddingStore::new(dim, ids, matrix).unwrap());

    let mut target_by_question = HashMap::new();
    let mut query_vectors = HashMap::new();
    let mut make_split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<QaInstance> {
        (0..count)
            .map(|n| {
                let target = rng.gen_range(0..n_docs);
                let question = format!("{prefix} question {n:03}: which passage applies?");
                let mut q = rotate(&rotation, &doc_vectors[target]);
                for x in &mut q {
                    *x += 0.05 * gaussian(rng);
                }
                target_by_question.insert(question.clone(), doc_id(target));
                query_vectors.insert(question.clone(), q.iter().map(|v| *v as f32).collect());
                QaInstance::new(
                    format!("{prefix}-{n:03}"),
                    question,
                    "done",
                    [doc_id(target)],
                )
            })
            .collect()
    };
    let train = make_split("train", n_train, &mut rng);
    let heldout = make_split("heldout", n_heldout, &mut rng);

    SyntheticTask {
        corpus,
        store,
        train,
        heldout,
        target_by_question,
        query_vectors,
        dim,
    }
}

/// Embedder over a fixed text -> vector map.
pub struct MapEmbedder {
    pub vectors: HashMap<String, Vec<f32>>,
    pub dim: usize,
}

impl QueryEmbedder for MapEmbedder {
    fn embed(&self, text: &str) -> Result<QueryVector, EmbedError> {
        self.vectors
            .get(text)
            .map(|v| QueryVector::new(v.clone()))
            .ok_or_else(|| EmbedError::UnknownText(text.to_string()))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Scripted scorer encoding the planted relevance: the target document of
/// the question in the continuation scores -1, everything else -10.
/// Generation always answers immediately.
pub struct PlantedBackend {
    pub target_by_question: HashMap<String, String>,
    pub hit_score: f64,
    pub miss_score: f64,
}

impl PlantedBackend {
    pub fn new(target_by_question: HashMap<String, String>) -> Self {
        Self {
            target_by_question,
            hit_score: -1.0,
            miss_score: -10.0,
        }
    }
}

impl LmBackend for PlantedBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, LmError> {
        // continuation is the fixed prediction JSON; slice the question out
        let tail = req
            .continuation
            .split_once("\"question\": \"")
            .map(|(_, rest)| rest)
            .ok_or_else(|| LmError::Backend("continuation lacks a question".into()))?;
        let question = tail
            .split_once('"')
            .map(|(q, _)| q)
            .ok_or_else(|| LmError::Backend("unterminated question".into()))?;
        let target = self
            .target_by_question
            .get(question)
            .ok_or_else(|| LmError::Backend(format!("unknown question {question:?}")))?;
        // the condition carries exactly one rendered document
        let number = &target[target.len() - 3..];
        let marker = format!("Title: Topic {number}\n");
        let log_prob = if req.condition.contains(&marker) {
            self.hit_score
        } else {
            self.miss_score
        };
        Ok(ScoreResult { log_prob, token_count: 1 })
    }

    fn generate(&self, _req: &GenerateRequest) -> Result<String, LmError> {
        Ok(r#"{"answer": "done"}"#.to_string())
    }
}

/// Top-1 agreement of the projected retriever with the planted targets.
pub fn top1_agreement(
    task: &SyntheticTask,
    projection: &rescore::trainer::QueryProjection,
    instances: &[QaInstance],
) -> f64 {
    let index = rescore::index::EmbeddingIndex::new(task.store.clone());
    let mut hits = 0usize;
    for inst in instances {
        let base = QueryVector::new(task.query_vectors[&inst.question].clone());
        let projected = projection.apply(&base).unwrap();
        let top = index.search_top_k(&projected, 1, &Default::default()).unwrap();
        if top[0].doc_id == task.target_by_question[&inst.question] {
            hits += 1;
        }
    }
    hits as f64 / instances.len() as f64
}

/// File-based offline fixture: corpus, embeddings, QA splits, scripted
/// program, and a config pointing at them.
pub struct OfflineFixture {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub qa_train: PathBuf,
    pub qa_eval: PathBuf,
    pub program: PathBuf,
    pub traces_out: PathBuf,
}

pub fn write_offline_fixture(dir: &Path, seed: u64) -> OfflineFixture {
    use rescore::corpus::{save_corpus, save_qa, Corpus, Document};
    use rescore::embeddings::export_embeddings;

    let n_docs = 40usize;
    let dim = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let docs: Vec<Document> = (0..n_docs)
        .map(|j| Document {
            id: format!("d{j:02}"),
            title: format!("T{j:02}"),
            text: format!("Offline passage number {j:02} used by the fixture."),
        })
        .collect();
    let corpus = Corpus::from_documents(docs).unwrap();
    let corpus_path = dir.join("corpus.jsonl");
    save_corpus(&corpus, &corpus_path).unwrap();

    let matrix: Vec<f32> = (0..n_docs)
        .flat_map(|_| {
            let v = random_unit_vector(&mut rng, dim);
            v.into_iter().map(|x| x as f32).collect::<Vec<f32>>()
        })
        .collect();
    let ids: Vec<String> = (0..n_docs).map(|j| format!("d{j:02}")).collect();
    let store = EmbeddingStore::new(dim, ids, matrix).unwrap();
    let embeddings_path = dir.join("embeddings.rsce");
    export_embeddings(&store, &embeddings_path).unwrap();

    let make_instance = |prefix: &str, n: usize, gold: &str| {
        QaInstance::new(
            format!("{prefix}-{n:02}"),
            format!("offline {prefix} question {n:02}?"),
            gold,
            [format!("d{:02}", (n * 3) % n_docs), format!("d{:02}", (n * 7 + 1) % n_docs)],
        )
    };
    let qa_train: Vec<QaInstance> = (0..8).map(|n| make_instance("train", n, "synthetic final")).collect();
    let qa_eval: Vec<QaInstance> = (0..5)
        .map(|n| make_instance("eval", n, if n % 2 == 0 { "synthetic final" } else { "something else" }))
        .collect();
    let qa_train_path = dir.join("qa_train.jsonl");
    let qa_eval_path = dir.join("qa_eval.jsonl");
    save_qa(&qa_train, &qa_train_path).unwrap();
    save_qa(&qa_eval, &qa_eval_path).unwrap();

    let mut program = String::new();
    program.push_str(
        "{\"kind\":\"generate\",\"match_all\":[\"Your task is to answer\",\"Hints:\\n\\n\"],\"value\":\"{\\\"answer\\\": \\\"Unknown\\\"}\",\"repeat\":true}\n",
    );
    program.push_str(
        "{\"kind\":\"generate\",\"match\":\"provide a hint\",\"value\":\"{\\\"hint\\\": \\\"clue about the corpus\\\"}\",\"repeat\":true}\n",
    );
    program.push_str(
        "{\"kind\":\"generate\",\"match\":\"Your task is to answer\",\"value\":\"{\\\"answer\\\": \\\"synthetic final\\\"}\",\"repeat\":true}\n",
    );
    for j in 0..n_docs {
        let value = -(((j * 13) % 17) as f64) - 0.5;
        program.push_str(&format!(
            "{{\"kind\":\"score\",\"match\":\"Title: T{j:02}\\n\",\"value\":{value}}}\n"
        ));
    }
    program.push_str("{\"kind\":\"score_default\",\"value\":-15.0}\n");
    let program_path = dir.join("program.jsonl");
    std::fs::write(&program_path, program).unwrap();

    let traces_out = dir.join("out");
    let config_text = format!(
        r#"[paths]
corpus = "corpus.jsonl"
qa_train = "qa_train.jsonl"
embeddings = "embeddings.rsce"
checkpoints = "ckpt"
traces = "out"

[gateway]
backend = "scripted"
program = "program.jsonl"
in_flight = 4

[embedder]
kind = "hashing"
dim = 8
hash_seed = 11

[run]
seed = 1234

[trainer]
top_m = 8
top_k = 2
max_iterations = 3
min_iterations = 2
batch_size = 4
learning_rate = 0.001
max_epochs = 40
early_stop = false
"#
    );
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config_text).unwrap();

    OfflineFixture {
        dir: dir.to_path_buf(),
        config: config_path,
        corpus: corpus_path,
        embeddings: embeddings_path,
        qa_train: qa_train_path,
        qa_eval: qa_eval_path,
        program: program_path,
        traces_out,
    }
}

/// Path to the compiled CLI binary.
pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_rescore"))
}

/// Run the CLI with args in a working directory; returns (status, stdout, stderr).
pub fn run_cli(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let output = Command::new(binary())
        .args(args)
        .current_dir(dir)
        .env_remove("RESCORE_LM_URL")
        .env_remove("RESCORE_LM_MODEL")
        .env_remove("RESCORE_LM_TOKEN")
        .env_remove("RESCORE_EMBED_URL")
        .output()
        .expect("spawn rescore binary");
    (
        output.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&output.stdout).into_owned(),
        String::from_utf8_lossy(&output.stderr).into_owned(),
    )
}

//! Answer and retrieval metrics over trace files.
//!
//! Answer normalization follows the standard reading-comprehension protocol:
//! lowercase, strip punctuation, drop the articles a/an/the, collapse
//! whitespace. F1 uses token multisets. Retrieval quality is measured as
//! cumulative multi-hop recall across iterations and plain recall@k over a
//! ranked list.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QaInstance;
use crate::orchestrator::RetrievalTrace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gt document set is empty; metric undefined")]
    EmptyGt,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("trace instance {0:?} not present in the qa set")]
    UnknownInstance(String),
    #[error("no traces to evaluate")]
    NoTraces,
}

pub const REPORT_SCHEMA: &str = "report_v1";

/// Aggregated metrics for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: String,
    pub dataset: String,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub cem: f64,
    /// Keys "1", "2", and "final".
    pub mhr: BTreeMap<String, f64>,
    pub recall_at: BTreeMap<u32, f64>,
}

/// Lowercase, remove punctuation, drop articles, collapse whitespace.
/// Idempotent.
pub fn normalize_answer(s: &str) -> String {
    const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !PUNCT.contains(*c)).collect();
    no_punct
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split_whitespace().map(str::to_string).collect()
}

/// 1 iff the normalized strings are equal.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Token-multiset F1. Both normalizing to empty counts as a match.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let pred_tokens = tokens(pred);
    let gold_tokens = tokens(gold);
    if pred_tokens.is_empty() && gold_tokens.is_empty() {
        return 1.0;
    }
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &gold_tokens {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &pred_tokens {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 iff the normalized gold tokens appear as a contiguous run inside the
/// normalized generated text.
pub fn cover_em(generated: &str, gold: &str) -> u8 {
    let text_tokens = tokens(generated);
    let gold_tokens = tokens(gold);
    if gold_tokens.is_empty() {
        return u8::from(text_tokens.is_empty());
    }
    if gold_tokens.len() > text_tokens.len() {
        return 0;
    }
    let hit = text_tokens
        .windows(gold_tokens.len())
        .any(|window| window == gold_tokens.as_slice());
    u8::from(hit)
}

/// Cumulative recall of the gt set over the union of the first `i`
/// iterations' retrievals. An `i` past the trace uses the whole trace.
pub fn mhr_at_k(trace: &RetrievalTrace, gt: &BTreeSet<String>, i: usize) -> Result<f64, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyGt);
    }
    let upto = i.min(trace.iterations.len());
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for iteration in &trace.iterations[..upto] {
        seen.extend(iteration.retrieved.iter().map(String::as_str));
    }
    let hits = gt.iter().filter(|id| seen.contains(id.as_str())).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// |gt ∩ top-k(ranked)| / |gt|.
pub fn recall_at_k(ranked: &[String], gt: &BTreeSet<String>, k: usize) -> Result<f64, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyGt);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let top: BTreeSet<&str> = ranked.iter().take(k).map(String::as_str).collect();
    let hits = gt.iter().filter(|id| top.contains(id.as_str())).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Macro-averaged report over traces. Answer metrics cover every trace;
/// retrieval metrics (mhr, recall@k) average over instances with gt labels,
/// using the first iteration's ranking for recall@k. MHR is reported at
/// i=1, i=2, and the full trace.
pub fn evaluate(
    dataset: &str,
    traces: &[RetrievalTrace],
    qa: &[QaInstance],
    ks: &[u32],
) -> Result<MetricReport, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::NoTraces);
    }
    let by_id: HashMap<&str, &QaInstance> = qa.iter().map(|q| (q.id.as_str(), q)).collect();

    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut cem_sum = 0.0;
    let mut mhr_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut recall_sums: BTreeMap<u32, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut labeled = 0usize;

    for trace in traces {
        let instance = by_id
            .get(trace.instance_id.as_str())
            .ok_or_else(|| EvalError::UnknownInstance(trace.instance_id.clone()))?;
        let gold = instance.answer();
        em_sum += f64::from(exact_match(&trace.final_answer, gold));
        f1_sum += f1(&trace.final_answer, gold);
        cem_sum += f64::from(cover_em(&trace.final_answer, gold));

        if !instance.gt_doc_ids.is_empty() {
            labeled += 1;
            for (key, i) in [("1", 1usize), ("2", 2usize), ("final", usize::MAX)] {
                let value = mhr_at_k(trace, &instance.gt_doc_ids, i)?;
                *mhr_sums.entry(key.to_string()).or_default() += value;
            }
            let first_ranking: &[String] = trace
                .iterations
                .first()
                .map(|it| it.retrieved.as_slice())
                .unwrap_or(&[]);
            for (&k, slot) in recall_sums.iter_mut() {
                *slot += recall_at_k(&first_ranking.to_vec(), &instance.gt_doc_ids, k as usize)?;
            }
        }
    }

    let n = traces.len();
    let mhr = if labeled > 0 {
        mhr_sums.into_iter().map(|(k, v)| (k, v / labeled as f64)).collect()
    } else {
        BTreeMap::new()
    };
    let recall_at = if labeled > 0 {
        recall_sums.into_iter().map(|(k, v)| (k, v / labeled as f64)).collect()
    } else {
        BTreeMap::new()
    };
    Ok(MetricReport {
        schema: REPORT_SCHEMA.to_string(),
        dataset: dataset.to_string(),
        n,
        em: em_sum / n as f64,
        f1: f1_sum / n as f64,
        cem: cem_sum / n as f64,
        mhr,
        recall_at,
    })
}

/// Per-iteration retrieval curve: macro MHR at each iteration index and the
/// fraction of labeled instances whose gt set is fully covered by then.
pub fn mhr_curve(traces: &[RetrievalTrace], qa: &[QaInstance]) -> Result<Vec<(usize, f64, f64)>, EvalError> {
    let by_id: HashMap<&str, &QaInstance> = qa.iter().map(|q| (q.id.as_str(), q)).collect();
    let max_iter = traces.iter().map(|t| t.iterations.len()).max().unwrap_or(0);
    let mut curve = Vec::new();
    for i in 1..=max_iter {
        let mut sum = 0.0;
        let mut all_found = 0usize;
        let mut labeled = 0usize;
        for trace in traces {
            let instance = by_id
                .get(trace.instance_id.as_str())
                .ok_or_else(|| EvalError::UnknownInstance(trace.instance_id.clone()))?;
            if instance.gt_doc_ids.is_empty() {
                continue;
            }
            labeled += 1;
            let value = mhr_at_k(trace, &instance.gt_doc_ids, i)?;
            sum += value;
            if value >= 1.0 {
                all_found += 1;
            }
        }
        if labeled == 0 {
            break;
        }
        curve.push((i, all_found as f64 / labeled as f64, sum / labeled as f64));
    }
    Ok(curve)
}

/// Human-readable table for terminal output.
pub fn format_report_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("dataset: {}  (n={})\n", report.dataset, report.n));
    out.push_str(&format!(
        "  EM {:.4}  F1 {:.4}  cEM {:.4}\n",
        report.em, report.f1, report.cem
    ));
    if !report.mhr.is_empty() {
        let fetch = |key: &str| report.mhr.get(key).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "  MHR@k  i=1 {:.4}  i=2 {:.4}  final {:.4}\n",
            fetch("1"),
            fetch("2"),
            fetch("final")
        ));
    }
    if !report.recall_at.is_empty() {
        out.push_str("  recall");
        for (k, v) in &report.recall_at {
            out.push_str(&format!("  R@{k} {v:.4}"));
        }
        out.push('\n');
    }
    out
}

//! Pseudo-label generation: LM log-scores over candidate documents, turned
//! into a soft target distribution or a re-ranking.
//!
//! Each candidate document is scored with one LM call whose continuation
//! holds the question and/or gold answer, depending on the mode. Raw scores
//! are joint sequence log-probabilities (token logprob sums), divided by a
//! temperature and pushed through a max-subtracted softmax.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::Document;
use crate::index::ScoredHit;
use crate::lm::{Gateway, LmError, ScoreRequest};
use crate::prompts::{render, PromptError, PromptTemplates};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("document {0:?} not found in corpus")]
    UnknownDocument(String),
    #[error("{what}")]
    Invalid { what: String },
}

/// Which conditional the LM scores for a candidate document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Probability of the question given the document (relevance).
    QuestionGivenDoc,
    /// Probability of the answer given question and document (consistency).
    AnswerGivenQuestionDoc,
    /// Probability of the question-answer pair given the document; the
    /// default labeling signal.
    JointQuestionAnswer,
}

/// Soft relevance target over the candidate documents, in retriever order.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGtDistribution {
    pub doc_ids: Vec<String>,
    pub log_scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Temperature-scaled, max-subtracted softmax. Probabilities are floored
/// at 1e-300 so downstream logs stay finite.
pub fn softmax_with_temperature(log_scores: &[f64], temperature: f64) -> Vec<f64> {
    assert!(!log_scores.is_empty(), "softmax over empty slice");
    assert!(temperature > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = log_scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum).max(1e-300)).collect()
}

/// Builds scoring prompts and converts LM scores into distributions.
pub struct Labeler<'a> {
    gateway: &'a Gateway,
    templates: &'a PromptTemplates,
    /// Divide each document's log-score by its token count before the
    /// softmax. Off by default: the target is a joint probability.
    pub length_normalize: bool,
}

impl<'a> Labeler<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a PromptTemplates) -> Self {
        Self {
            gateway,
            templates,
            length_normalize: false,
        }
    }

    pub fn with_length_normalize(mut self, on: bool) -> Self {
        self.length_normalize = on;
        self
    }

    /// Render the condition/continuation pair scoring `doc` under `mode`.
    /// The answer is unused in question mode; the question appears in the
    /// condition only for answer mode, matching the conditional each mode
    /// measures.
    pub fn build_score_prompt(
        &self,
        mode: ScoreMode,
        doc: &Document,
        question: &str,
        answer: &str,
    ) -> Result<(String, String), LabelError> {
        if question.is_empty() {
            return Err(LabelError::Invalid {
                what: "question must be nonempty".into(),
            });
        }
        if answer.is_empty() && mode != ScoreMode::QuestionGivenDoc {
            return Err(LabelError::Invalid {
                what: "answer must be nonempty for this mode".into(),
            });
        }
        let rendered_doc = doc.render();
        let mut condition_values: BTreeMap<&str, &str> = BTreeMap::new();
        condition_values.insert("documents", rendered_doc.as_str());
        let mut prediction_values: BTreeMap<&str, &str> = BTreeMap::new();

        let (cond_name, cond_tpl, pred_name, pred_tpl) = match mode {
            ScoreMode::QuestionGivenDoc => {
                prediction_values.insert("question", question);
                (
                    "score_question_condition",
                    &self.templates.score_question_condition,
                    "score_question_prediction",
                    &self.templates.score_question_prediction,
                )
            }
            ScoreMode::AnswerGivenQuestionDoc => {
                condition_values.insert("question", question);
                prediction_values.insert("answer", answer);
                (
                    "score_answer_condition",
                    &self.templates.score_answer_condition,
                    "score_answer_prediction",
                    &self.templates.score_answer_prediction,
                )
            }
            ScoreMode::JointQuestionAnswer => {
                prediction_values.insert("question", question);
                prediction_values.insert("answer", answer);
                (
                    "score_joint_condition",
                    &self.templates.score_joint_condition,
                    "score_joint_prediction",
                    &self.templates.score_joint_prediction,
                )
            }
        };
        let condition = render(cond_name, cond_tpl, &condition_values)?;
        let prediction = render(pred_name, pred_tpl, &prediction_values)?;
        Ok((condition, prediction))
    }

    fn score_candidates<'d>(
        &self,
        mode: ScoreMode,
        docs: &[&'d Document],
        question: &str,
        answer: &str,
    ) -> Result<Vec<f64>, LabelError> {
        let reqs: Vec<ScoreRequest> = docs
            .iter()
            .map(|doc| {
                self.build_score_prompt(mode, doc, question, answer)
                    .map(|(condition, continuation)| ScoreRequest::new(condition, continuation))
            })
            .collect::<Result<_, _>>()?;
        let results = self.gateway.score_batch(&reqs)?;
        Ok(results
            .into_iter()
            .map(|r| {
                if self.length_normalize {
                    r.log_prob / r.token_count.max(1) as f64
                } else {
                    r.log_prob
                }
            })
            .collect())
    }

    fn resolve<'c>(
        corpus: &'c crate::corpus::Corpus,
        hits: &[ScoredHit],
    ) -> Result<Vec<&'c Document>, LabelError> {
        hits.iter()
            .map(|h| {
                corpus
                    .get(&h.doc_id)
                    .ok_or_else(|| LabelError::UnknownDocument(h.doc_id.clone()))
            })
            .collect()
    }

    /// Score every candidate under `mode` and softmax into a target
    /// distribution. Any scoring failure aborts the whole labeling; no
    /// partial distributions. Order follows `top_m`.
    pub fn label(
        &self,
        corpus: &crate::corpus::Corpus,
        question: &str,
        answer: &str,
        top_m: &[ScoredHit],
        mode: ScoreMode,
        temperature: f64,
    ) -> Result<PseudoGtDistribution, LabelError> {
        if top_m.is_empty() {
            return Err(LabelError::NoCandidates);
        }
        if temperature <= 0.0 {
            return Err(LabelError::BadTemperature(temperature));
        }
        let docs = Self::resolve(corpus, top_m)?;
        let log_scores = self.score_candidates(mode, &docs, question, answer)?;
        let probs = softmax_with_temperature(&log_scores, temperature);
        Ok(PseudoGtDistribution {
            doc_ids: top_m.iter().map(|h| h.doc_id.clone()).collect(),
            log_scores,
            probs,
        })
    }

    /// Diagnostic: score the joint as the sum of the question and answer
    /// conditionals (two calls per document) instead of one joint call.
    pub fn label_factorized(
        &self,
        corpus: &crate::corpus::Corpus,
        question: &str,
        answer: &str,
        top_m: &[ScoredHit],
        temperature: f64,
    ) -> Result<PseudoGtDistribution, LabelError> {
        if top_m.is_empty() {
            return Err(LabelError::NoCandidates);
        }
        if temperature <= 0.0 {
            return Err(LabelError::BadTemperature(temperature));
        }
        let docs = Self::resolve(corpus, top_m)?;
        let q_scores = self.score_candidates(ScoreMode::QuestionGivenDoc, &docs, question, answer)?;
        let a_scores = self.score_candidates(ScoreMode::AnswerGivenQuestionDoc, &docs, question, answer)?;
        let log_scores: Vec<f64> = q_scores.iter().zip(&a_scores).map(|(q, a)| q + a).collect();
        let probs = softmax_with_temperature(&log_scores, temperature);
        Ok(PseudoGtDistribution {
            doc_ids: top_m.iter().map(|h| h.doc_id.clone()).collect(),
            log_scores,
            probs,
        })
    }

    /// Re-rank candidates by descending LM log-score; ties break by
    /// ascending document id.
    pub fn rerank(
        &self,
        corpus: &crate::corpus::Corpus,
        question: &str,
        answer: &str,
        candidates: &[ScoredHit],
        mode: ScoreMode,
    ) -> Result<Vec<String>, LabelError> {
        if candidates.is_empty() {
            return Err(LabelError::NoCandidates);
        }
        let docs = Self::resolve(corpus, candidates)?;
        let log_scores = self.score_candidates(mode, &docs, question, answer)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            log_scores[b]
                .partial_cmp(&log_scores[a])
                .expect("finite scores")
                .then_with(|| candidates[a].doc_id.cmp(&candidates[b].doc_id))
        });
        Ok(order.into_iter().map(|i| candidates[i].doc_id.clone()).collect())
    }
}

//! Prompt templates for answering, thought generation, query rewriting, and
//! document scoring.
//!
//! Defaults are embedded byte-exact; a templates directory can override any
//! of them. Placeholders are `{documents}`, `{question}`, `{hints}`, and
//! `{answer}`. Substitution is single-pass: braces inside substituted values
//! are never re-expanded, and a placeholder left unfilled is an error.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} still contains placeholder {{{placeholder}}} after substitution")]
    Unsubstituted { template: String, placeholder: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{what}")]
    Invalid { what: String },
}

pub const PLACEHOLDERS: [&str; 4] = ["documents", "question", "hints", "answer"];

/// The full template set. Score templates come in condition/prediction
/// pairs: the condition is what the model is given, the prediction is the
/// continuation whose log-probability is measured.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub answer: String,
    pub thought: String,
    pub rewrite: String,
    pub score_answer_condition: String,
    pub score_answer_prediction: String,
    pub score_question_condition: String,
    pub score_question_prediction: String,
    pub score_joint_condition: String,
    pub score_joint_prediction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            answer: include_str!("prompts/answer.txt").to_string(),
            thought: include_str!("prompts/thought.txt").to_string(),
            rewrite: include_str!("prompts/rewrite.txt").to_string(),
            score_answer_condition: include_str!("prompts/score_answer_condition.txt").to_string(),
            score_answer_prediction: include_str!("prompts/score_answer_prediction.txt").to_string(),
            score_question_condition: include_str!("prompts/score_question_condition.txt").to_string(),
            score_question_prediction: include_str!("prompts/score_question_prediction.txt").to_string(),
            score_joint_condition: include_str!("prompts/score_joint_condition.txt").to_string(),
            score_joint_prediction: include_str!("prompts/score_joint_prediction.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Defaults overridden by any files present in `dir`. File names match
    /// the field names with a `.txt` extension.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut templates = Self::default();
        let slots: [(&str, &mut String); 9] = [
            ("answer.txt", &mut templates.answer),
            ("thought.txt", &mut templates.thought),
            ("rewrite.txt", &mut templates.rewrite),
            ("score_answer_condition.txt", &mut templates.score_answer_condition),
            ("score_answer_prediction.txt", &mut templates.score_answer_prediction),
            ("score_question_condition.txt", &mut templates.score_question_condition),
            ("score_question_prediction.txt", &mut templates.score_question_prediction),
            ("score_joint_condition.txt", &mut templates.score_joint_condition),
            ("score_joint_prediction.txt", &mut templates.score_joint_prediction),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        Ok(templates)
    }
}

/// Substitute placeholders in one pass. Every placeholder present in the
/// template must have a value; placeholders missing from `values` are an
/// error, extra values are ignored.
pub fn render(
    template_name: &str,
    template: &str,
    values: &BTreeMap<&str, &str>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let mut matched = false;
        for name in PLACEHOLDERS {
            if after.starts_with(name) && after[name.len()..].starts_with('}') {
                match values.get(name) {
                    Some(value) => {
                        out.push_str(value);
                        rest = &after[name.len() + 1..];
                        matched = true;
                    }
                    None => {
                        return Err(PromptError::Unsubstituted {
                            template: template_name.to_string(),
                            placeholder: name.to_string(),
                        });
                    }
                }
                break;
            }
        }
        if !matched {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Render a document list for a `{documents}` slot.
pub fn render_documents(docs: &[&crate::corpus::Document]) -> String {
    docs.iter().map(|d| d.render()).collect::<Vec<_>>().join("\n\n")
}

/// Render accumulated thoughts for a `{hints}` slot.
pub fn render_hints(thoughts: &[String]) -> String {
    thoughts.join("\n")
}

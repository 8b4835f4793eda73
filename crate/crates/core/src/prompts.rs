//! Text templates shared by the oracle and the fusion encoder.
//!
//! All templates are literal: fields are inserted verbatim, nothing is
//! trimmed, re-cased or truncated here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::KnowledgeEntry;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("{0} must be non-empty")]
    EmptyField(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassageKind {
    ExplicitKnowledge,
    ImplicitCandidate,
    Question,
}

/// One independently encoded text unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub kind: PassageKind,
    pub text: String,
}

/// `context: {caption}. {tag1}, {tag2}, .... question: {question}`
///
/// With no tags the tag segment is dropped:
/// `context: {caption}. question: {question}`.
pub fn build_context_prompt<S: AsRef<str>>(caption: &str, tags: &[S], question: &str) -> Result<String, PromptError> {
    if caption.is_empty() {
        return Err(PromptError::EmptyField("caption"));
    }
    if question.is_empty() {
        return Err(PromptError::EmptyField("question"));
    }
    let mut out = String::with_capacity(caption.len() + question.len() + 24 + tags.len() * 12);
    out.push_str("context: ");
    out.push_str(caption);
    out.push_str(". ");
    if !tags.is_empty() {
        for (i, t) in tags.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(t.as_ref());
        }
        out.push_str(". ");
    }
    out.push_str("question: ");
    out.push_str(question);
    Ok(out)
}

/// `{question} {candidate}. This is because`
pub fn build_explanation_prompt(question: &str, candidate: &str) -> Result<String, PromptError> {
    if candidate.is_empty() {
        return Err(PromptError::EmptyField("candidate"));
    }
    if question.is_empty() {
        return Err(PromptError::EmptyField("question"));
    }
    Ok(format!("{question} {candidate}. This is because"))
}

/// `entity: {entity} description: {description}`
pub fn build_explicit_passage(entry: &KnowledgeEntry) -> Passage {
    Passage {
        kind: PassageKind::ExplicitKnowledge,
        text: format!("entity: {} description: {}", entry.entity, entry.description),
    }
}

/// `candidate: {candidate} evidence: {explanation}`; the explanation may be empty.
pub fn build_implicit_passage(candidate: &str, explanation: &str) -> Passage {
    Passage {
        kind: PassageKind::ImplicitCandidate,
        text: format!("candidate: {candidate} evidence: {explanation}"),
    }
}

pub fn question_passage(prompt: impl Into<String>) -> Passage {
    Passage {
        kind: PassageKind::Question,
        text: prompt.into(),
    }
}

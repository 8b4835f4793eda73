//! Majority-vote ensembling over independently trained models.

use std::collections::HashMap;

use super::model::{FusionError, FusionInput, FusionModel};
use crate::eval::normalize_answer;

/// Most frequent normalized answer; ties go to the answer produced by the
/// lowest model index. `None` for an empty slice.
pub fn majority_vote<S: AsRef<str>>(answers: &[S]) -> Option<String> {
    let normalized: Vec<String> = answers.iter().map(|a| normalize_answer(a.as_ref())).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in &normalized {
        *counts.entry(a).or_default() += 1;
    }
    let mut best: Option<&str> = None;
    for a in &normalized {
        if best.is_none_or(|b| counts[a.as_str()] > counts[b]) {
            best = Some(a);
        }
    }
    best.map(str::to_string)
}

/// Greedy answers of every model, in model order.
pub fn member_answers(models: &[FusionModel], input: &FusionInput) -> Result<Vec<String>, FusionError> {
    models
        .iter()
        .map(|m| Ok(m.generate(&m.tokenize_input(input)?)))
        .collect()
}

/// Ensemble prediction; a single model returns its own normalized answer.
pub fn predict(models: &[FusionModel], input: &FusionInput) -> Result<String, FusionError> {
    if models.is_empty() {
        return Err(FusionError::Config("ensemble needs at least one model".into()));
    }
    let answers = member_answers(models, input)?;
    Ok(majority_vote(&answers).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_and_ties() {
        assert_eq!(majority_vote(&["red", "red", "blue"]).unwrap(), "red");
        assert_eq!(majority_vote(&["red", "blue", "green"]).unwrap(), "red");
        assert_eq!(majority_vote(&["blue", "red", "red"]).unwrap(), "red");
        // normalization runs first, so a bare article votes for ""
        assert_eq!(majority_vote(&["a", "an", "b"]).unwrap(), "");
        assert_eq!(majority_vote(&["x", "y", "y", "x"]).unwrap(), "x");
        assert_eq!(majority_vote(&["The Dog", "dog!", "cat"]).unwrap(), "dog");
        assert_eq!(majority_vote::<&str>(&[]), None);
    }
}

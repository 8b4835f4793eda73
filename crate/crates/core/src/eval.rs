//! Answer normalization and VQA soft accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GROUND_TRUTH_COUNT: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sample {sample_id}: expected {GROUND_TRUTH_COUNT} ground-truth answers, got {got}")]
    GroundTruthCount { sample_id: String, got: usize },
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
}

/// A question with its ten annotator answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub image_id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    /// `train` or `test`; absent means train.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl QASample {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.answers.len() != GROUND_TRUTH_COUNT {
            return Err(EvalError::GroundTruthCount {
                sample_id: self.sample_id.clone(),
                got: self.answers.len(),
            });
        }
        Ok(())
    }

    pub fn is_test(&self) -> bool {
        self.split.as_deref() == Some("test")
    }

    /// Most frequent normalized annotation; ties go to the earliest listed.
    pub fn training_target(&self) -> String {
        let normalized: Vec<String> = self.answers.iter().map(|a| normalize_answer(a)).collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for a in &normalized {
            *counts.entry(a.as_str()).or_default() += 1;
        }
        let mut best = normalized[0].as_str();
        for a in &normalized {
            if counts[a.as_str()] > counts[best] {
                best = a;
            }
        }
        best.to_string()
    }
}

/// Lowercase, delete ASCII punctuation, drop the articles `a`/`an`/`the`,
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Which soft-accuracy formula to apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftAccuracy {
    /// `min(matches / 3, 1)`.
    #[default]
    Simple,
    /// Mean of `min(matches / 3, 1)` over the ten leave-one-annotator-out subsets.
    Averaged,
}

pub fn soft_accuracy(prediction: &str, ground_truth: &[String]) -> f64 {
    soft_accuracy_with(prediction, ground_truth, SoftAccuracy::Simple)
}

pub fn soft_accuracy_with(prediction: &str, ground_truth: &[String], variant: SoftAccuracy) -> f64 {
    let pred = normalize_answer(prediction);
    let matches: Vec<bool> = ground_truth.iter().map(|g| normalize_answer(g) == pred).collect();
    let total = matches.iter().filter(|m| **m).count();
    match variant {
        SoftAccuracy::Simple => (total as f64 / 3.0).min(1.0),
        SoftAccuracy::Averaged => {
            if matches.is_empty() {
                return 0.0;
            }
            let sum: f64 = matches
                .iter()
                .map(|&held_out| {
                    let rest = total - usize::from(held_out);
                    (rest as f64 / 3.0).min(1.0)
                })
                .sum();
            sum / matches.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub prediction: Option<String>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean soft accuracy times 100.
    pub accuracy: f64,
    pub samples: usize,
    pub missing_predictions: usize,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,prediction,accuracy\n");
        for s in &self.per_sample {
            let pred = s.prediction.as_deref().unwrap_or("");
            out.push_str(&format!("{},{},{:.6}\n", csv_field(&s.sample_id), csv_field(pred), s.accuracy));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores every sample's `prediction`; missing predictions score 0.
/// The per-sample table is sorted by sample id.
pub fn score_dataset(samples: &[QASample], variant: SoftAccuracy) -> Result<EvalReport, EvalError> {
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut missing = 0;
    for s in samples {
        s.validate()?;
        let accuracy = match &s.prediction {
            Some(p) => soft_accuracy_with(p, &s.answers, variant),
            None => {
                missing += 1;
                0.0
            }
        };
        per_sample.push(SampleScore {
            sample_id: s.sample_id.clone(),
            prediction: s.prediction.clone(),
            accuracy,
        });
    }
    per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    for w in per_sample.windows(2) {
        if w[0].sample_id == w[1].sample_id {
            return Err(EvalError::DuplicateSample(w[0].sample_id.clone()));
        }
    }
    let accuracy = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|s| s.accuracy).sum::<f64>() / per_sample.len() as f64 * 100.0
    };
    Ok(EvalReport {
        accuracy,
        samples: per_sample.len(),
        missing_predictions: missing,
        per_sample,
    })
}

/// Exact-match rate (after normalization) of predictions against targets.
pub fn exact_match_rate(pairs: &[(String, String)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(p, t)| normalize_answer(p) == normalize_answer(t))
        .count();
    hits as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(matching: usize, answer: &str) -> Vec<String> {
        (0..10)
            .map(|i| if i < matching { answer.to_string() } else { format!("other{i}") })
            .collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Dogs!!"), "dogs");
        assert_eq!(normalize_answer("an   apple  pie"), "apple pie");
        assert_eq!(normalize_answer("the.dog"), "thedog");
        assert_eq!(normalize_answer("  A  "), "");
    }

    #[test]
    fn soft_accuracy_formula() {
        assert_eq!(soft_accuracy("dog", &gt(5, "dog")), 1.0);
        assert_eq!(soft_accuracy("dog", &gt(1, "dog")), 1.0 / 3.0);
        assert_eq!(soft_accuracy("dog", &gt(0, "dog")), 0.0);
        assert_eq!(soft_accuracy("The Dog.", &gt(2, "dog")), 2.0 / 3.0);
    }

    #[test]
    fn averaged_variant() {
        // 3 matches: leaving out a match gives 2/3 (3 times), otherwise 1 (7 times)
        let v = soft_accuracy_with("dog", &gt(3, "dog"), SoftAccuracy::Averaged);
        assert!((v - (3.0 * 2.0 / 3.0 + 7.0) / 10.0).abs() < 1e-12);
        assert_eq!(soft_accuracy_with("dog", &gt(10, "dog"), SoftAccuracy::Averaged), 1.0);
    }

    #[test]
    fn dataset_scoring() {
        let samples: Vec<QASample> = (0..4)
            .map(|i| QASample {
                sample_id: format!("s{}", 3 - i),
                image_id: "img".into(),
                question: "q".into(),
                answers: gt(4, "dog"),
                prediction: Some("dog".into()),
                split: None,
            })
            .collect();
        let r = score_dataset(&samples, SoftAccuracy::Simple).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.per_sample[0].sample_id, "s0");

        let mut bad = samples.clone();
        bad[0].answers.pop();
        assert!(matches!(
            score_dataset(&bad, SoftAccuracy::Simple),
            Err(EvalError::GroundTruthCount { got: 9, .. })
        ));
    }

    #[test]
    fn training_target_majority() {
        let s = QASample {
            sample_id: "x".into(),
            image_id: "i".into(),
            question: "q".into(),
            answers: vec!["Cat", "dog", "the dog", "cat", "Dog", "x", "y", "z", "w", "v"]
                .into_iter()
                .map(String::from)
                .collect(),
            prediction: None,
            split: None,
        };
        assert_eq!(s.training_target(), "dog");
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,30}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once.clone());
        }

        #[test]
        fn accuracy_invariant_under_normalization(p in "[a-zA-Z .!]{0,12}", n in 0usize..11) {
            let g = gt(n, "the cat");
            prop_assert_eq!(soft_accuracy(&p, &g), soft_accuracy(&normalize_answer(&p), &g));
        }
    }
}

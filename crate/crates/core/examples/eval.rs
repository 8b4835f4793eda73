//! Soft accuracy, answer normalization and dataset scoring.

use regionqa::eval::{normalize_answer, score_dataset, soft_accuracy, QASample, SoftAccuracy};

fn main() {
    let truth: Vec<String> = ["surfing", "surfing", "Surfing!", "swimming", "riding waves"]
        .into_iter()
        .chain(std::iter::repeat_n("surf", 5))
        .map(String::from)
        .collect();
    for pred in ["surfing", "The Surfing.", "swimming", "surf", "sailing"] {
        println!("{pred:>14} -> {:<14} soft acc {:.4}", format!("{:?}", normalize_answer(pred)), soft_accuracy(pred, &truth));
    }

    let sample = |id: &str, pred: Option<&str>| QASample {
        sample_id: id.into(),
        image_id: format!("img_{id}"),
        question: "what sport is this?".into(),
        answers: truth.clone(),
        prediction: pred.map(String::from),
        split: None,
    };
    let samples = vec![sample("a", Some("surfing")), sample("b", Some("swimming")), sample("c", None)];
    for variant in [SoftAccuracy::Simple, SoftAccuracy::Averaged] {
        let r = score_dataset(&samples, variant).unwrap();
        println!("{variant:?}: accuracy {:.2} over {} samples ({} missing)", r.accuracy, r.samples, r.missing_predictions);
    }
    print!("{}", score_dataset(&samples, SoftAccuracy::Simple).unwrap().to_csv());
}

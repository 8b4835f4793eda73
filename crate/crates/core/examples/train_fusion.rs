//! Train a small fusion model directly on hand-built inputs, checkpoint it and
//! reload it.

use regionqa::fusion::{checkpoint, train, FusionInput, FusionModel, ModelConfig, OptimizerConfig, TrainingExample, Vocab};
use regionqa::prompts::build_implicit_passage;
use regionqa::regions::NormalizedBox;

fn input(color: &str, question: &str) -> FusionInput {
    FusionInput {
        explicit: vec![],
        implicit: vec![build_implicit_passage(color, &format!("the ball looks {color}"))],
        region_embeddings: vec![vec![0.5; 8]],
        boxes: vec![NormalizedBox { x1: 0.1, y1: 0.1, x2: 0.4, y2: 0.5 }],
        question: question.into(),
    }
}

fn main() {
    let data = [("red", "what color is the ball?"), ("blue", "which color is the ball?"), ("green", "what colour is the ball?")];
    let vocab = Vocab::build(data.iter().flat_map(|(c, q)| [*c, *q, "candidate: evidence: the ball looks"]));
    let config = ModelConfig {
        model_dim: 32,
        heads: 2,
        encoder_layers: 1,
        visual_encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 64,
        region_dim: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = FusionModel::new(config, vocab, 7).unwrap();
    println!("{} parameters", model.num_parameters());
    let examples: Vec<TrainingExample> = data
        .iter()
        .map(|(c, q)| TrainingExample {
            input: model.tokenize_input(&input(c, q)).unwrap(),
            target: model.answer_ids(c),
        })
        .collect();
    let opt = OptimizerConfig { lr: 3e-3, warmup_steps: 20, steps: 200, batch_size: 3, weight_decay: 0.0, ..OptimizerConfig::default() };
    let curve = train(&mut model, &examples, &opt, 0).unwrap();
    for p in curve.iter().step_by(50).chain(curve.last()) {
        println!("step {:>3}  loss {:.4}", p.step, p.loss);
    }

    let path = std::env::temp_dir().join("regionqa_train_fusion.rvck");
    checkpoint::save(&model, &path).unwrap();
    let reloaded = checkpoint::load(&path).unwrap();
    for (c, q) in data {
        let t = reloaded.tokenize_input(&input(c, q)).unwrap();
        println!("{q:<26} -> {} (expected {c})", reloaded.generate(&t));
    }
}

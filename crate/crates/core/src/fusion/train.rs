//! AdamW training loop with linear warmup.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{FusionModel, TokenizedInput};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            warmup_steps: 1000,
            steps: 10000,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based `step`: linear ramp over `warmup_steps`, then flat.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("non-finite loss {loss} at step {step} on samples {samples:?}")]
    NonFiniteLoss { step: usize, loss: f64, samples: Vec<usize> },
    #[error("non-finite gradient for parameter {param} at step {step}")]
    NonFiniteGradient { step: usize, param: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: TokenizedInput,
    /// Answer ids ending in EOS.
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,loss\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    out
}

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        let c = &self.config;
        let lr = c.lr_at(self.t);
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let decay = if p.rows > 1 && p.cols > 1 { c.weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * p.data[i]);
            }
        }
    }
}

fn dropout_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Trains in place. Batches are drawn from a per-epoch shuffle seeded by
/// `seed`; per-sample gradients are computed in parallel and summed in batch
/// order, so the curve is identical for any thread count.
pub fn train(
    model: &mut FusionModel,
    data: &[TrainingExample],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<LossPoint>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if opt.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = AdamW::new(opt.clone(), model.params());
    let mut curve = Vec::with_capacity(opt.steps);

    for step in 0..opt.steps {
        let mut batch = Vec::with_capacity(opt.batch_size);
        while batch.len() < opt.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let m: &FusionModel = model;
        let results: Vec<(f64, Vec<Tensor>)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let ex = &data[i];
                m.loss_and_grad(&ex.input, &ex.target, Some(dropout_seed(seed, step, slot)))
            })
            .collect();

        let scale = 1.0 / batch.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                loss,
                samples: batch,
            });
        }
        let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        for (_, g) in &results {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.add_assign(gi);
            }
        }
        for (gi, name) in grads.iter_mut().zip(model.param_names()) {
            *gi = gi.scale(scale);
            if !gi.all_finite() {
                return Err(TrainError::NonFiniteGradient {
                    step,
                    param: name.clone(),
                });
            }
        }
        adam.step(model.params_mut(), &grads);
        curve.push(LossPoint { step, loss });
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.6}");
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::model::{FusionInput, ModelConfig};
    use crate::fusion::tokenizer::Vocab;

    fn setup() -> (FusionModel, Vec<TrainingExample>) {
        let vocab = Vocab::build(["red blue green what color is it"]);
        let config = ModelConfig {
            model_dim: 16,
            heads: 2,
            encoder_layers: 1,
            visual_encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 32,
            max_passage_tokens: 12,
            max_answer_tokens: 3,
            max_regions: 2,
            region_dim: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let model = FusionModel::new(config, vocab, 7).unwrap();
        let data = ["red", "blue", "green"]
            .iter()
            .map(|c| {
                let input = FusionInput {
                    explicit: vec![],
                    implicit: vec![],
                    region_embeddings: vec![],
                    boxes: vec![],
                    question: format!("what color is it {c}"),
                };
                TrainingExample {
                    input: model.tokenize_input(&input).unwrap(),
                    target: model.answer_ids(c),
                }
            })
            .collect();
        (model, data)
    }

    fn opt(steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            lr: 1e-2,
            warmup_steps: 5,
            steps,
            batch_size: 2,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn warmup_schedule() {
        let o = OptimizerConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..OptimizerConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| o.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -1.0])];
        let g = vec![Tensor::from_vec(1, 2, vec![0.5, -3.0])];
        let mut a = AdamW::new(
            OptimizerConfig {
                lr: 0.1,
                warmup_steps: 0,
                ..OptimizerConfig::default()
            },
            &p,
        );
        a.step(&mut p, &g);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_skips_vectors() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            warmup_steps: 0,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut p = vec![Tensor::from_vec(2, 2, vec![1.0; 4]), Tensor::from_vec(1, 2, vec![1.0; 2])];
        let g = vec![Tensor::zeros(2, 2), Tensor::zeros(1, 2)];
        AdamW::new(cfg, &p).step(&mut p, &g);
        assert!((p[0].data[0] - 0.95).abs() < 1e-12);
        assert_eq!(p[1].data[0], 1.0);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let (mut a, data) = setup();
        let mut b = a.clone();
        let ca = train(&mut a, &data, &opt(60), 3).unwrap();
        let cb = train(&mut b, &data, &opt(60), 3).unwrap();
        assert_eq!(ca, cb);
        assert!(ca.last().unwrap().loss < ca[0].loss * 0.5);
        assert_eq!(a.params(), b.params());
        let csv = loss_curve_csv(&ca[..2]);
        assert!(csv.starts_with("step,loss\n0,"));
    }

    #[test]
    fn empty_and_nonfinite() {
        let (mut m, data) = setup();
        assert_eq!(train(&mut m, &[], &opt(1), 0), Err(TrainError::EmptyDataset));
        m.params_mut()[0].data[0] = f64::NAN;
        let mut ex = data[0].clone();
        ex.input.question[0] = 0;
        let err = train(&mut m, &[ex], &opt(1), 0).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { step: 0, .. }));
    }
}

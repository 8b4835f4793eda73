//! Fusion-in-decoder answer generator.
//!
//! Every knowledge passage and the context-aware question are encoded
//! independently by one shared text encoder, with positions restarting at 0
//! for each passage. Region features and box coordinates are projected by two
//! separate linear layers, interleaved per region (feature, box, feature,
//! box, ...) and run through a dedicated visual encoder. The decoder
//! cross-attends over the row-wise concatenation
//! `[explicit..., implicit..., visual, question]`.
//!
//! All layers are pre-LayerNorm transformer blocks with GELU feed-forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{Graph, Var};
use super::tensor::{sinusoidal_positions, Tensor};
use super::tokenizer::{Vocab, BOS, EOS};
use crate::prompts::Passage;
use crate::regions::NormalizedBox;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("region embedding has dimension {found}, model expects {expected}")]
    RegionDim { expected: usize, found: usize },
    #[error("{embeddings} region embeddings but {boxes} boxes")]
    RegionCount { embeddings: usize, boxes: usize },
    #[error("vocabulary has {vocab} tokens, config says {config}")]
    VocabSize { vocab: usize, config: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over target positions.
    #[default]
    Mean,
    /// Sum over target positions.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled in from the vocabulary when a model is created.
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub visual_encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_passage_tokens: usize,
    pub max_answer_tokens: usize,
    /// Regions kept per image, in stored order.
    pub max_regions: usize,
    /// Region embedding width.
    pub region_dim: usize,
    pub dropout: f64,
    /// Add sinusoidal positions to the interleaved visual token sequence.
    pub visual_positions: bool,
    pub loss_reduction: LossReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            model_dim: 64,
            heads: 4,
            encoder_layers: 2,
            visual_encoder_layers: 9,
            decoder_layers: 2,
            ffn_dim: 256,
            max_passage_tokens: 64,
            max_answer_tokens: 8,
            max_regions: 36,
            region_dim: 512,
            dropout: 0.1,
            visual_positions: true,
            loss_reduction: LossReduction::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("visual_encoder_layers", self.visual_encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_passage_tokens", self.max_passage_tokens),
            ("max_answer_tokens", self.max_answer_tokens),
            ("max_regions", self.max_regions),
            ("region_dim", self.region_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(FusionError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(FusionError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FusionError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn position_rows(&self) -> usize {
        self.max_passage_tokens
            .max(2 * self.max_regions)
            .max(self.max_answer_tokens + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ffn: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Parameter indices, derived from the config alone.
#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    region_proj: Linear,
    box_proj: Linear,
    visual: Vec<EncoderLayer>,
    visual_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out_proj: Linear,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: self.add(format!("{name}.weight"), fan_in, fan_out, Init::Normal(std)),
            b: self.add(format!("{name}.bias"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: self.add(format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, d: usize, ffn: usize) -> EncoderLayer {
        EncoderLayer {
            ln_attn: self.norm(&format!("{name}.ln_attn"), d),
            attn: self.attention(&format!("{name}.attn"), d),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), d),
            ff_in: self.linear(&format!("{name}.ff_in"), d, ffn),
            ff_out: self.linear(&format!("{name}.ff_out"), ffn, d),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, LayoutBuilder) {
    let d = c.model_dim;
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let tok_emb = b.add("tok_emb".into(), c.vocab_size, d, Init::Normal(1.0));
    let encoder = (0..c.encoder_layers)
        .map(|i| b.encoder_layer(&format!("encoder.{i}"), d, c.ffn_dim))
        .collect();
    let encoder_norm = b.norm("encoder.final_ln", d);
    let region_proj = b.linear("visual.region_proj", c.region_dim, d);
    let box_proj = b.linear("visual.box_proj", 4, d);
    let visual = (0..c.visual_encoder_layers)
        .map(|i| b.encoder_layer(&format!("visual.{i}"), d, c.ffn_dim))
        .collect();
    let visual_norm = b.norm("visual.final_ln", d);
    let decoder = (0..c.decoder_layers)
        .map(|i| {
            let name = format!("decoder.{i}");
            DecoderLayer {
                ln_self: b.norm(&format!("{name}.ln_self"), d),
                self_attn: b.attention(&format!("{name}.self_attn"), d),
                ln_cross: b.norm(&format!("{name}.ln_cross"), d),
                cross_attn: b.attention(&format!("{name}.cross_attn"), d),
                ln_ffn: b.norm(&format!("{name}.ln_ffn"), d),
                ff_in: b.linear(&format!("{name}.ff_in"), d, c.ffn_dim),
                ff_out: b.linear(&format!("{name}.ff_out"), c.ffn_dim, d),
            }
        })
        .collect();
    let decoder_norm = b.norm("decoder.final_ln", d);
    let out_proj = b.linear("out_proj", d, c.vocab_size);
    (
        Layout {
            tok_emb,
            encoder,
            encoder_norm,
            region_proj,
            box_proj,
            visual,
            visual_norm,
            decoder,
            decoder_norm,
            out_proj,
        },
        b,
    )
}

/// Text-level model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub explicit: Vec<Passage>,
    pub implicit: Vec<Passage>,
    pub region_embeddings: Vec<Vec<f32>>,
    pub boxes: Vec<NormalizedBox>,
    /// Context-aware question prompt.
    pub question: String,
}

/// Token ids and region tensors ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInput {
    pub explicit: Vec<Vec<u32>>,
    pub implicit: Vec<Vec<u32>>,
    pub question: Vec<u32>,
    /// `m × region_dim`
    pub regions: Tensor,
    /// `m × 4`
    pub boxes: Tensor,
}

impl TokenizedInput {
    pub fn num_regions(&self) -> usize {
        self.regions.rows
    }
}

/// Encoder outputs, one token-vector sequence per source.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBundle {
    pub knowledge: Vec<Tensor>,
    pub implicit: Vec<Tensor>,
    /// `2m × D`, absent when there are no regions.
    pub visual: Option<Tensor>,
    pub question: Tensor,
}

impl EncodedBundle {
    /// Row concatenation in decoding order.
    pub fn memory(&self) -> Tensor {
        let mut parts: Vec<&Tensor> = self.knowledge.iter().chain(&self.implicit).collect();
        if let Some(v) = &self.visual {
            parts.push(v);
        }
        parts.push(&self.question);
        Tensor::concat_rows(&parts)
    }

    pub fn memory_len(&self) -> usize {
        self.knowledge.iter().chain(&self.implicit).map(|t| t.rows).sum::<usize>()
            + self.visual.as_ref().map_or(0, |v| v.rows)
            + self.question.rows
    }
}

/// Dropout state for one forward pass.
struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate == 0.0 {
            return x;
        }
        let (rows, cols) = g.value(x).shape();
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, Tensor::from_vec(rows, cols, data))
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    config: ModelConfig,
    vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    positions: Tensor,
}

impl FusionModel {
    /// Randomly initialized model; `config.vocab_size` is set from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, FusionError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .map(|(&(r, c), init)| match init {
                Init::Normal(std) => Tensor::randn(r, c, *std, &mut rng),
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::from_vec(r, c, vec![1.0; r * c]),
            })
            .collect();
        let positions = sinusoidal_positions(config.position_rows(), config.model_dim);
        Ok(Self {
            config,
            vocab,
            names: builder.names,
            params,
            layout,
            positions,
        })
    }

    /// Model from explicit parameter tensors, in [`FusionModel::param_names`] order.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: Vec<Tensor>) -> Result<Self, FusionError> {
        if config.vocab_size != vocab.len() {
            return Err(FusionError::VocabSize {
                vocab: vocab.len(),
                config: config.vocab_size,
            });
        }
        let mut model = Self::new(config, vocab, 0)?;
        if params.len() != model.params.len() {
            return Err(FusionError::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (p, q)) in model.params.iter().zip(&params).enumerate() {
            if p.shape() != q.shape() {
                return Err(FusionError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    model.names[i],
                    q.shape(),
                    p.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text, self.config.max_passage_tokens)
    }

    /// Answer ids ending in EOS, used as decoder targets.
    pub fn answer_ids(&self, answer: &str) -> Vec<u32> {
        self.vocab.encode(answer, self.config.max_answer_tokens)
    }

    /// Tokenizes passages and keeps the first `max_regions` regions.
    pub fn tokenize_input(&self, input: &FusionInput) -> Result<TokenizedInput, FusionError> {
        if input.region_embeddings.len() != input.boxes.len() {
            return Err(FusionError::RegionCount {
                embeddings: input.region_embeddings.len(),
                boxes: input.boxes.len(),
            });
        }
        let m = input.boxes.len().min(self.config.max_regions);
        let s = self.config.region_dim;
        let mut regions = Tensor::zeros(m, s);
        let mut boxes = Tensor::zeros(m, 4);
        for j in 0..m {
            let e = &input.region_embeddings[j];
            if e.len() != s {
                return Err(FusionError::RegionDim {
                    expected: s,
                    found: e.len(),
                });
            }
            for (o, v) in regions.row_mut(j).iter_mut().zip(e) {
                *o = f64::from(*v);
            }
            boxes.row_mut(j).copy_from_slice(&input.boxes[j].to_array());
        }
        Ok(TokenizedInput {
            explicit: input.explicit.iter().map(|p| self.tokenize(&p.text)).collect(),
            implicit: input.implicit.iter().map(|p| self.tokenize(&p.text)).collect(),
            question: self.tokenize(&input.question),
            regions,
            boxes,
        })
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn attention(&self, g: &mut Graph, queries: Var, keys: Var, a: Attention, causal: bool) -> Var {
        let q = self.linear(g, queries, a.q);
        let k = self.linear(g, keys, a.k);
        let v = self.linear(g, keys, a.v);
        let heads = self.config.heads;
        let dh = self.config.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, causal);
            outs.push(g.matmul(probs, vh));
        }
        let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.linear(g, joined, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff_in: Linear, ff_out: Linear) -> Var {
        let h = self.linear(g, x, ff_in);
        let h = g.gelu(h);
        self.linear(g, h, ff_out)
    }

    fn encoder_block(&self, g: &mut Graph, drop: &mut Dropout, x: Var, l: &EncoderLayer) -> Var {
        let h = self.norm(g, x, l.ln_attn);
        let h = self.attention(g, h, h, l.attn, false);
        let h = drop.apply(g, h);
        let x = g.add(x, h);
        let h = self.norm(g, x, l.ln_ffn);
        let h = self.feed_forward(g, h, l.ff_in, l.ff_out);
        let h = drop.apply(g, h);
        g.add(x, h)
    }

    fn positions(&self, len: usize) -> Tensor {
        assert!(len <= self.positions.rows, "sequence longer than position table");
        Tensor::from_vec(len, self.positions.cols, self.positions.data[..len * self.positions.cols].to_vec())
    }

    fn embed(&self, g: &mut Graph, drop: &mut Dropout, ids: &[u32]) -> Var {
        let table = g.param(self.layout.tok_emb);
        let x = g.gather(table, ids);
        let pe = g.constant(self.positions(ids.len()));
        let x = g.add(x, pe);
        drop.apply(g, x)
    }

    fn encode_text_var(&self, g: &mut Graph, drop: &mut Dropout, ids: &[u32]) -> Var {
        let mut x = self.embed(g, drop, ids);
        for l in &self.layout.encoder {
            x = self.encoder_block(g, drop, x, l);
        }
        self.norm(g, x, self.layout.encoder_norm)
    }

    fn encode_visual_var(&self, g: &mut Graph, drop: &mut Dropout, regions: &Tensor, boxes: &Tensor) -> Option<Var> {
        if regions.rows == 0 {
            return None;
        }
        let r = g.constant(regions.clone());
        let b = g.constant(boxes.clone());
        let r = self.linear(g, r, self.layout.region_proj);
        let b = self.linear(g, b, self.layout.box_proj);
        let mut x = g.interleave(r, b);
        if self.config.visual_positions {
            let pe = g.constant(self.positions(2 * regions.rows));
            x = g.add(x, pe);
        }
        let mut x = drop.apply(g, x);
        for l in &self.layout.visual {
            x = self.encoder_block(g, drop, x, l);
        }
        Some(self.norm(g, x, self.layout.visual_norm))
    }

    fn memory_var(&self, g: &mut Graph, drop: &mut Dropout, input: &TokenizedInput) -> Var {
        let mut parts = Vec::new();
        for ids in input.explicit.iter().chain(&input.implicit) {
            parts.push(self.encode_text_var(g, drop, ids));
        }
        if let Some(v) = self.encode_visual_var(g, drop, &input.regions, &input.boxes) {
            parts.push(v);
        }
        parts.push(self.encode_text_var(g, drop, &input.question));
        g.concat_rows(&parts)
    }

    fn decoder_var(&self, g: &mut Graph, drop: &mut Dropout, memory: Var, input_ids: &[u32]) -> Var {
        let mut x = self.embed(g, drop, input_ids);
        for l in &self.layout.decoder {
            let h = self.norm(g, x, l.ln_self);
            let h = self.attention(g, h, h, l.self_attn, true);
            let h = drop.apply(g, h);
            x = g.add(x, h);
            let h = self.norm(g, x, l.ln_cross);
            let h = self.attention(g, h, memory, l.cross_attn, false);
            let h = drop.apply(g, h);
            x = g.add(x, h);
            let h = self.norm(g, x, l.ln_ffn);
            let h = self.feed_forward(g, h, l.ff_in, l.ff_out);
            let h = drop.apply(g, h);
            x = g.add(x, h);
        }
        let x = self.norm(g, x, self.layout.decoder_norm);
        self.linear(g, x, self.layout.out_proj)
    }

    /// Shared text encoder applied to one token sequence: `(len, D)`.
    pub fn encode_tokens(&self, ids: &[u32]) -> Tensor {
        let mut g = Graph::new(&self.params);
        let v = self.encode_text_var(&mut g, &mut Dropout::off(), ids);
        g.into_value(v)
    }

    pub fn encode_passage(&self, passage: &Passage) -> Tensor {
        self.encode_tokens(&self.tokenize(&passage.text))
    }

    pub fn encode_question(&self, prompt_x: &str) -> Tensor {
        self.encode_tokens(&self.tokenize(prompt_x))
    }

    /// Visual encoding `(2m, D)` of region embeddings (`m × S`) and boxes (`m × 4`).
    pub fn encode_visual(&self, regions: &Tensor, boxes: &Tensor) -> Result<Option<Tensor>, FusionError> {
        if regions.rows != boxes.rows {
            return Err(FusionError::RegionCount {
                embeddings: regions.rows,
                boxes: boxes.rows,
            });
        }
        if regions.rows > 0 && regions.cols != self.config.region_dim {
            return Err(FusionError::RegionDim {
                expected: self.config.region_dim,
                found: regions.cols,
            });
        }
        if regions.rows > self.config.max_regions {
            return Err(FusionError::Config(format!(
                "{} regions exceed max_regions {}",
                regions.rows, self.config.max_regions
            )));
        }
        let mut g = Graph::new(&self.params);
        Ok(self
            .encode_visual_var(&mut g, &mut Dropout::off(), regions, boxes)
            .map(|v| g.into_value(v)))
    }

    pub fn encode(&self, input: &TokenizedInput) -> EncodedBundle {
        let mut drop = Dropout::off();
        let mut g = Graph::new(&self.params);
        let knowledge: Vec<Var> = input
            .explicit
            .iter()
            .map(|ids| self.encode_text_var(&mut g, &mut drop, ids))
            .collect();
        let implicit: Vec<Var> = input
            .implicit
            .iter()
            .map(|ids| self.encode_text_var(&mut g, &mut drop, ids))
            .collect();
        let visual = self.encode_visual_var(&mut g, &mut drop, &input.regions, &input.boxes);
        let question = self.encode_text_var(&mut g, &mut drop, &input.question);
        EncodedBundle {
            knowledge: knowledge.iter().map(|&v| g.value(v).clone()).collect(),
            implicit: implicit.iter().map(|&v| g.value(v).clone()).collect(),
            visual: visual.map(|v| g.value(v).clone()),
            question: g.value(question).clone(),
        }
    }

    /// Decoder logits `(len(prefix), V)` over a fixed memory.
    pub fn decoder_logits(&self, memory: &Tensor, prefix: &[u32]) -> Tensor {
        let mut g = Graph::new(&self.params);
        let mem = g.constant(memory.clone());
        let logits = self.decoder_var(&mut g, &mut Dropout::off(), mem, prefix);
        g.into_value(logits)
    }

    /// Greedy decoding; ties go to the lowest token id. Stops after EOS
    /// (included in the output) or `max_len` tokens.
    pub fn decode(&self, bundle: &EncodedBundle, max_len: usize) -> Vec<u32> {
        let memory = bundle.memory();
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let logits = self.decoder_logits(&memory, &prefix);
            let last = logits.row(logits.rows - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let id = best as u32;
            out.push(id);
            if id == EOS {
                break;
            }
            prefix.push(id);
        }
        out
    }

    /// Greedy answer string.
    pub fn generate(&self, input: &TokenizedInput) -> String {
        let ids = self.decode(&self.encode(input), self.config.max_answer_tokens);
        self.vocab.decode(&ids)
    }

    fn divisor(&self, len: usize) -> f64 {
        match self.config.loss_reduction {
            LossReduction::Mean => len as f64,
            LossReduction::Sum => 1.0,
        }
    }

    /// Teacher-forced cross-entropy of `target` (ids ending in EOS) given an
    /// already encoded bundle.
    pub fn loss(&self, bundle: &EncodedBundle, target: &[u32]) -> f64 {
        let mut g = Graph::new(&self.params);
        let mem = g.constant(bundle.memory());
        let input = decoder_input(target);
        let logits = self.decoder_var(&mut g, &mut Dropout::off(), mem, &input);
        let l = g.cross_entropy(logits, target, self.divisor(target.len()));
        g.value(l).data[0]
    }

    /// End-to-end loss of one sample, no dropout.
    pub fn sample_loss(&self, input: &TokenizedInput, target: &[u32]) -> f64 {
        self.forward_loss(input, target, None).0
    }

    /// Loss and gradients for every parameter. `dropout_seed` enables dropout.
    pub fn loss_and_grad(&self, input: &TokenizedInput, target: &[u32], dropout_seed: Option<u64>) -> (f64, Vec<Tensor>) {
        let (loss, grads) = self.forward_loss(input, target, dropout_seed.map(|s| (s, true)));
        (loss, grads.expect("gradients requested"))
    }

    fn forward_loss(
        &self,
        input: &TokenizedInput,
        target: &[u32],
        grad: Option<(u64, bool)>,
    ) -> (f64, Option<Vec<Tensor>>) {
        let mut rng = grad.map(|(seed, _)| ChaCha8Rng::seed_from_u64(seed));
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng: rng.as_mut(),
        };
        let mut g = Graph::new(&self.params);
        let memory = self.memory_var(&mut g, &mut drop, input);
        let dec_in = decoder_input(target);
        let logits = self.decoder_var(&mut g, &mut drop, memory, &dec_in);
        let l = g.cross_entropy(logits, target, self.divisor(target.len()));
        let loss = g.value(l).data[0];
        let grads = grad.map(|_| g.backward(l));
        (loss, grads)
    }

    /// Loss with gradients but no dropout, for gradient checking.
    pub fn loss_and_grad_exact(&self, input: &TokenizedInput, target: &[u32]) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new(&self.params);
        let mut drop = Dropout::off();
        let memory = self.memory_var(&mut g, &mut drop, input);
        let dec_in = decoder_input(target);
        let logits = self.decoder_var(&mut g, &mut drop, memory, &dec_in);
        let l = g.cross_entropy(logits, target, self.divisor(target.len()));
        let loss = g.value(l).data[0];
        (loss, g.backward(l))
    }
}

/// `[BOS, target[..n-1]]`
fn decoder_input(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    v.push(BOS);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{build_explicit_passage, build_implicit_passage};
    use crate::kb::KnowledgeEntry;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            heads: 2,
            encoder_layers: 1,
            visual_encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 16,
            max_passage_tokens: 16,
            max_answer_tokens: 4,
            max_regions: 4,
            region_dim: 6,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["entity description candidate evidence context question dog cat frisbee : . ,"])
    }

    fn input(m: usize) -> FusionInput {
        FusionInput {
            explicit: vec![build_explicit_passage(&KnowledgeEntry::new("dog", "cat", "Animal"))],
            implicit: vec![build_implicit_passage("frisbee", "dog")],
            region_embeddings: (0..m).map(|j| vec![0.1 * j as f32; 6]).collect(),
            boxes: (0..m).map(|_| NormalizedBox::FULL).collect(),
            question: "context: dog. question: cat".into(),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.vocab_size = 10;
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.decoder_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes() {
        let m = FusionModel::new(tiny_config(), vocab(), 1).unwrap();
        let t = m.tokenize_input(&input(3)).unwrap();
        let b = m.encode(&t);
        assert_eq!(b.knowledge[0].shape(), (t.explicit[0].len(), 8));
        assert_eq!(b.visual.as_ref().unwrap().rows, 6);
        let expected = t.explicit[0].len() + t.implicit[0].len() + 6 + t.question.len();
        assert_eq!(b.memory_len(), expected);
        assert_eq!(b.memory().rows, expected);
        let single = m.encode_visual(&Tensor::zeros(1, 6), &Tensor::zeros(1, 4)).unwrap().unwrap();
        assert_eq!(single.rows, 2);
    }

    #[test]
    fn regions_truncated_to_max() {
        let m = FusionModel::new(tiny_config(), vocab(), 1).unwrap();
        let t = m.tokenize_input(&input(7)).unwrap();
        assert_eq!(t.num_regions(), 4);
        let mut bad = input(2);
        bad.boxes.pop();
        assert!(matches!(m.tokenize_input(&bad), Err(FusionError::RegionCount { .. })));
        let mut bad = input(1);
        bad.region_embeddings[0].push(0.0);
        assert!(matches!(m.tokenize_input(&bad), Err(FusionError::RegionDim { .. })));
    }

    #[test]
    fn zero_output_projection_emits_lowest_id() {
        let mut m = FusionModel::new(tiny_config(), vocab(), 3).unwrap();
        for name in ["out_proj.weight", "out_proj.bias"] {
            let p = m.param_by_name_mut(name).unwrap();
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = m.tokenize_input(&input(1)).unwrap();
        let out = m.decode(&m.encode(&t), 5);
        assert_eq!(out, vec![0; 5]);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut m = FusionModel::new(tiny_config(), vocab(), 3).unwrap();
        for name in ["out_proj.weight", "out_proj.bias"] {
            m.param_by_name_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = m.tokenize_input(&input(2)).unwrap();
        let target = m.answer_ids("dog cat");
        let l = m.sample_loss(&t, &target);
        assert!((l - (m.vocab().len() as f64).ln()).abs() < 1e-12);
        let b = m.encode(&t);
        assert!((m.loss(&b, &target) - l).abs() < 1e-12);
    }

    #[test]
    fn bundle_loss_matches_end_to_end() {
        let m = FusionModel::new(tiny_config(), vocab(), 5).unwrap();
        let t = m.tokenize_input(&input(2)).unwrap();
        let target = m.answer_ids("frisbee");
        let a = m.sample_loss(&t, &target);
        let b = m.loss(&m.encode(&t), &target);
        assert!((a - b).abs() < 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn dropout_changes_loss_only_when_enabled() {
        let mut c = tiny_config();
        c.dropout = 0.5;
        let m = FusionModel::new(c, vocab(), 5).unwrap();
        let t = m.tokenize_input(&input(2)).unwrap();
        let target = m.answer_ids("dog");
        let clean = m.sample_loss(&t, &target);
        let (noisy, _) = m.loss_and_grad(&t, &target, Some(11));
        let (again, _) = m.loss_and_grad(&t, &target, Some(11));
        assert_ne!(clean, noisy);
        assert_eq!(noisy, again);
    }
}

//! Synthetic datasets where each answer is planted in exactly one source.
//!
//! Three channels:
//!
//! - **explicit**: a made-up entity whose knowledge-base description holds the
//!   answer (`"{noun} used for {purpose}"`); the first region embeds the entry
//!   text plus half its tag, so the entry is the retrieval argmax.
//! - **implicit**: the oracle cache answers the image's context prompt with a
//!   majority of the planted answer.
//! - **positional**: the answer (`left`, `right`, `top`, `bottom`) is given only
//!   by the box of the asked-about object, which is always the first region.
//!
//! Everything is derived from one seed through a ChaCha stream and
//! [`stub_embed`], so a seed reproduces the dataset bit for bit.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::QASample;
use crate::kb::{default_categories, KnowledgeEntry, TagEntry};
use crate::oracle::{write_cache_records, CacheRecord, DEFAULT_CANDIDATES_U};
use crate::prompts::{build_context_prompt, build_explanation_prompt};
use crate::regions::{retrieve_explicit, retrieve_tags, stub_embed, KnowledgeStore, RegionArtifact, TagStore};
use crate::vecindex::{Aggregation, EmbeddingMatrix};
use crate::{rvem, regions::write_region_artifact};

pub const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];

const PURPOSES: [&str; 12] = [
    "cutting", "digging", "cooking", "writing", "fishing", "painting", "cleaning", "lifting", "sewing", "climbing",
    "sailing", "drawing",
];

const TRAITS: [&str; 10] = [
    "speed", "strength", "music", "luck", "wisdom", "silence", "courage", "patience", "beauty", "loyalty",
];

/// Candidates offered by the oracle for questions it cannot help with.
const NOISE: [&str; 5] = ["maybe", "unknown", "nothing", "something", "anything"];

const OBJECTS: [&str; 40] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "bench", "bird", "cat",
    "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie",
    "suitcase", "frisbee", "skis", "snowboard", "kite", "bottle", "cup", "fork", "knife", "spoon", "bowl", "banana",
    "apple", "sandwich", "orange", "broccoli",
];

/// Noun used in descriptions, per default category.
fn category_noun(category: &str) -> &'static str {
    match category {
        "Role" => "job",
        "Point of interest" => "place",
        "Tool" => "tool",
        "Vehicle" => "vehicle",
        "Animal" => "animal",
        "Clothing" => "garment",
        "Company" => "firm",
        "Sport" => "game",
        _ => "thing",
    }
}

/// Categories outside the default filter, used for filler entries.
const OTHER_CATEGORIES: [&str; 2] = ["Food", "Color"];

#[derive(Debug, Error)]
pub enum SynError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("planting check failed for sample {sample_id}: {msg}")]
    Planting { sample_id: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Rvem(#[from] rvem::RvemError),
    #[error(transparent)]
    Region(#[from] crate::regions::RegionError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Explicit,
    Implicit,
    Positional,
}

/// Relative channel weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelMix {
    pub explicit: f64,
    pub implicit: f64,
    pub positional: f64,
}

impl Default for ChannelMix {
    fn default() -> Self {
        Self {
            explicit: 1.0,
            implicit: 1.0,
            positional: 1.0,
        }
    }
}

impl ChannelMix {
    pub fn only(channel: Channel) -> Self {
        let mut m = Self {
            explicit: 0.0,
            implicit: 0.0,
            positional: 0.0,
        };
        match channel {
            Channel::Explicit => m.explicit = 1.0,
            Channel::Implicit => m.implicit = 1.0,
            Channel::Positional => m.positional = 1.0,
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub kb_size: usize,
    pub tag_size: usize,
    pub dim: usize,
    pub mix: ChannelMix,
    /// Fraction of samples (taken from the end) marked `test`.
    pub test_fraction: f64,
    /// Oracle candidates per sample.
    pub u: usize,
    /// Tag counts P for which context prompts are cached.
    pub cache_for_p: Vec<usize>,
    /// Extra regions per image after the planted one.
    pub distractors: usize,
    pub image_size: (u32, u32),
}

impl Default for SynConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 32,
            kb_size: 200,
            tag_size: 40,
            dim: 64,
            mix: ChannelMix::default(),
            test_fraction: 0.0,
            u: DEFAULT_CANDIDATES_U,
            cache_for_p: vec![crate::regions::DEFAULT_TAGS_P],
            distractors: 1,
            image_size: (640, 480),
        }
    }
}

/// Where and how a sample's answer was planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantingLabel {
    pub sample_id: String,
    pub channel: Channel,
    pub answer: String,
    /// Entity name, object tag, or image tag the answer hangs off.
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct SynDataset {
    pub config: SynConfig,
    /// Every knowledge-base line, including categories outside the default filter.
    pub kb: Vec<KnowledgeEntry>,
    /// One row per `kb` line.
    pub kb_embeddings: EmbeddingMatrix,
    pub tags: Vec<String>,
    pub tag_embeddings: EmbeddingMatrix,
    pub artifacts: Vec<RegionArtifact>,
    pub samples: Vec<QASample>,
    pub labels: Vec<PlantingLabel>,
    pub cache: Vec<CacheRecord>,
}

/// File layout written by [`SynDataset::write`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynPaths {
    pub kb: PathBuf,
    pub kb_embeddings: PathBuf,
    pub tags: PathBuf,
    pub tag_embeddings: PathBuf,
    pub regions: PathBuf,
    pub samples: PathBuf,
    pub labels: PathBuf,
    pub cache: PathBuf,
}

impl SynPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            kb: dir.join("kb.jsonl"),
            kb_embeddings: dir.join("kb.rvem"),
            tags: dir.join("tags.txt"),
            tag_embeddings: dir.join("tags.rvem"),
            regions: dir.join("regions"),
            samples: dir.join("samples.jsonl"),
            labels: dir.join("labels.jsonl"),
            cache: dir.join("oracle_cache.jsonl"),
        }
    }
}

fn made_up_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(C[rng.random_range(0..C.len())] as char);
            w.push(V[rng.random_range(0..V.len())] as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// `normalize(w·a + b)`
fn weighted_unit_sum(w: f32, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut v: Vec<f32> = a.iter().zip(b).map(|(x, y)| w * x + y).collect();
    crate::regions::l2_normalize(&mut v);
    v
}

/// Pixel box whose centre falls in the zone named by `position`.
fn planted_box(rng: &mut ChaCha8Rng, position: &str, (w, h): (u32, u32)) -> [f64; 4] {
    let (cx, cy) = match position {
        "left" => (rng.random_range(0.1..0.3), rng.random_range(0.35..0.65)),
        "right" => (rng.random_range(0.7..0.9), rng.random_range(0.35..0.65)),
        "top" => (rng.random_range(0.35..0.65), rng.random_range(0.1..0.3)),
        _ => (rng.random_range(0.35..0.65), rng.random_range(0.7..0.9)),
    };
    let half = rng.random_range(0.05..0.1);
    let (w, h) = (f64::from(w), f64::from(h));
    [((cx - half) * w).round(), ((cy - half) * h).round(), ((cx + half) * w).round(), ((cy + half) * h).round()]
}

fn random_box(rng: &mut ChaCha8Rng, (w, h): (u32, u32)) -> [f64; 4] {
    let x1 = rng.random_range(0.0..0.7);
    let y1 = rng.random_range(0.0..0.7);
    let bw = rng.random_range(0.1..0.3);
    let bh = rng.random_range(0.1..0.3);
    let (w, h) = (f64::from(w), f64::from(h));
    [(x1 * w).round(), (y1 * h).round(), ((x1 + bw) * w).round(), ((y1 + bh) * h).round()]
}

/// Ten annotations: the planted answer seven times, three others from `pool`.
fn ground_truth(rng: &mut ChaCha8Rng, answer: &str, pool: &[&str]) -> Vec<String> {
    let others: Vec<&str> = pool.iter().copied().filter(|p| *p != answer).collect();
    let mut out: Vec<String> = vec![answer.to_string(); 7];
    for _ in 0..3 {
        out.push(others.choose(rng).expect("pool has alternatives").to_string());
    }
    out.shuffle(rng);
    out
}

fn channel_sequence(rng: &mut ChaCha8Rng, mix: &ChannelMix, n: usize) -> Result<Vec<Channel>, SynError> {
    let weights = [
        (Channel::Explicit, mix.explicit),
        (Channel::Implicit, mix.implicit),
        (Channel::Positional, mix.positional),
    ];
    if weights.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(SynError::Infeasible("channel weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(SynError::Infeasible("all channel weights are zero".into()));
    }
    // Largest-remainder apportionment, then a seeded shuffle.
    let exact: Vec<f64> = weights.iter().map(|(_, w)| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in &order {
        if left == 0 {
            break;
        }
        if weights[i].1 > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    let mut seq: Vec<Channel> = weights
        .iter()
        .zip(&counts)
        .flat_map(|((c, _), &k)| std::iter::repeat_n(*c, k))
        .collect();
    seq.shuffle(rng);
    Ok(seq)
}

pub fn generate(config: &SynConfig) -> Result<SynDataset, SynError> {
    let c = config;
    if c.n_samples == 0 || c.kb_size == 0 || c.tag_size == 0 || c.dim == 0 || c.u == 0 {
        return Err(SynError::Infeasible("sizes must be at least 1".into()));
    }
    if c.tag_size < c.distractors + 1 {
        return Err(SynError::Infeasible(format!(
            "tag_size {} cannot supply {} distinct regions per image",
            c.tag_size,
            c.distractors + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let channels = channel_sequence(&mut rng, &c.mix, c.n_samples)?;
    let n_explicit = channels.iter().filter(|ch| **ch == Channel::Explicit).count();
    if c.kb_size < n_explicit {
        return Err(SynError::Infeasible(format!(
            "kb_size {} is smaller than the {n_explicit} explicit answers to plant",
            c.kb_size
        )));
    }

    // Tag vocabulary: common object words, then made-up words.
    let mut taken: HashSet<String> = OBJECTS.iter().map(|s| s.to_string()).collect();
    let mut tags: Vec<String> = OBJECTS.iter().take(c.tag_size).map(|s| s.to_string()).collect();
    while tags.len() < c.tag_size {
        tags.push(made_up_word(&mut rng, &mut taken));
    }
    let tag_vecs: Vec<Vec<f32>> = tags.iter().map(|t| stub_embed(t, c.dim)).collect();

    // Knowledge base: planted entities first in generation order, then filler,
    // then the whole list shuffled so planted rows are not contiguous.
    let defaults = default_categories();
    let mut kb: Vec<KnowledgeEntry> = Vec::with_capacity(c.kb_size);
    for _ in 0..c.kb_size {
        let entity = made_up_word(&mut rng, &mut taken);
        let category = if kb.len() < n_explicit || rng.random_bool(0.8) {
            defaults.choose(&mut rng).expect("categories").clone()
        } else {
            OTHER_CATEGORIES.choose(&mut rng).expect("categories").to_string()
        };
        let purpose = PURPOSES.choose(&mut rng).expect("purposes");
        let description = format!("{} used for {purpose}", category_noun(&category));
        kb.push(KnowledgeEntry::new(entity, description, category));
    }
    let mut kb_order: Vec<usize> = (0..kb.len()).collect();
    kb_order.shuffle(&mut rng);
    let kb: Vec<KnowledgeEntry> = kb_order.iter().map(|&i| kb[i].clone()).collect();
    let mut planted_rows = vec![0usize; n_explicit];
    for (row, &orig) in kb_order.iter().enumerate() {
        if orig < n_explicit {
            planted_rows[orig] = row;
        }
    }
    let kb_vecs: Vec<Vec<f32>> = kb.iter().map(|e| stub_embed(&e.reformat(), c.dim)).collect();

    let mut artifacts = Vec::with_capacity(c.n_samples);
    let mut samples = Vec::with_capacity(c.n_samples);
    let mut labels = Vec::with_capacity(c.n_samples);
    let mut implicit_plan: Vec<Option<(String, String)>> = Vec::with_capacity(c.n_samples);
    let n_test = ((c.n_samples as f64) * c.test_fraction).round() as usize;
    let mut next_explicit = 0usize;

    for (i, channel) in channels.iter().enumerate() {
        let sample_id = format!("s{i:05}");
        let image_id = format!("img{i:05}");
        let mut tag_ids: Vec<usize> = (0..tags.len()).collect();
        tag_ids.shuffle(&mut rng);
        let main_tag = tags[tag_ids[0]].clone();
        let mut boxes = Vec::new();
        let mut vecs = Vec::new();

        let (question, answer, source, pool): (String, String, String, &[&str]) = match channel {
            Channel::Explicit => {
                let row = planted_rows[next_explicit];
                next_explicit += 1;
                let entry = &kb[row];
                let purpose = entry.description.rsplit(' ').next().expect("purpose").to_string();
                boxes.push(random_box(&mut rng, c.image_size));
                vecs.push(weighted_unit_sum(0.5, &tag_vecs[tag_ids[0]], &kb_vecs[row]));
                (
                    format!("what is the {} used for?", entry.entity),
                    purpose,
                    entry.entity.clone(),
                    &PURPOSES,
                )
            }
            Channel::Implicit => {
                let answer = TRAITS.choose(&mut rng).expect("traits").to_string();
                boxes.push(random_box(&mut rng, c.image_size));
                vecs.push(tag_vecs[tag_ids[0]].clone());
                (
                    format!("what is this {main_tag} known for?"),
                    answer,
                    main_tag.clone(),
                    &TRAITS,
                )
            }
            Channel::Positional => {
                let answer = POSITIONS.choose(&mut rng).expect("positions").to_string();
                boxes.push(planted_box(&mut rng, &answer, c.image_size));
                vecs.push(tag_vecs[tag_ids[0]].clone());
                (format!("where is the {main_tag}?"), answer, main_tag.clone(), &POSITIONS)
            }
        };
        for d in 0..c.distractors {
            boxes.push(random_box(&mut rng, c.image_size));
            vecs.push(tag_vecs[tag_ids[1 + d]].clone());
        }
        let artifact = RegionArtifact {
            image_id: image_id.clone(),
            boxes,
            image_size: c.image_size,
            embedding_dim: c.dim,
            region_embeddings: vecs,
            caption: format!("a photo of a {main_tag}"),
        };
        artifact.validate()?;
        artifacts.push(artifact);
        implicit_plan.push((*channel == Channel::Implicit).then(|| (answer.clone(), main_tag.clone())));
        samples.push(QASample {
            sample_id: sample_id.clone(),
            image_id,
            question,
            answers: ground_truth(&mut rng, &answer, pool),
            prediction: None,
            split: Some(if i + n_test >= c.n_samples { "test" } else { "train" }.into()),
        });
        labels.push(PlantingLabel {
            sample_id,
            channel: *channel,
            answer,
            source,
        });
    }

    let kb_embeddings = EmbeddingMatrix::with_row_ids(c.dim, kb_vecs).map_err(crate::regions::RegionError::from)?;
    let tag_embeddings =
        EmbeddingMatrix::new(c.dim, tag_vecs, tags.clone()).map_err(crate::regions::RegionError::from)?;

    // Verify explicit planting against the filtered store the pipeline will use.
    let kept: Vec<usize> = (0..kb.len()).filter(|&r| defaults.contains(&kb[r].category)).collect();
    let store = KnowledgeStore::new(
        kept.iter().map(|&r| kb[r].clone()).collect(),
        kb_embeddings.select_rows(&kept).map_err(crate::regions::RegionError::from)?,
    )?;
    for ((label, artifact), sample) in labels.iter().zip(&artifacts).zip(&samples) {
        if label.channel != Channel::Explicit {
            continue;
        }
        let top = retrieve_explicit(artifact, &store, 1, Aggregation::GlobalMax)?;
        if top.first().map(|(e, _)| e.entity.as_str()) != Some(label.source.as_str()) {
            return Err(SynError::Planting {
                sample_id: sample.sample_id.clone(),
                msg: format!("entity {} is not the top retrieval hit", label.source),
            });
        }
    }

    let tag_entries: Vec<TagEntry> = tags
        .iter()
        .map(|t| TagEntry {
            tag: t.clone(),
            embedding: None,
        })
        .collect();
    let tag_store = TagStore::new(&tag_entries, tag_embeddings.clone())?;
    let cache = build_cache(&mut rng, c, &artifacts, &samples, &implicit_plan, &tag_store)?;

    Ok(SynDataset {
        config: c.clone(),
        kb,
        kb_embeddings,
        tags,
        tag_embeddings,
        artifacts,
        samples,
        labels,
        cache,
    })
}

fn build_cache(
    rng: &mut ChaCha8Rng,
    c: &SynConfig,
    artifacts: &[RegionArtifact],
    samples: &[QASample],
    implicit_plan: &[Option<(String, String)>],
    tags: &TagStore,
) -> Result<Vec<CacheRecord>, SynError> {
    let mut records = Vec::new();
    let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut push = |records: &mut Vec<CacheRecord>, prompt: String, n: usize, completions: Vec<String>| {
        if seen.insert((prompt.clone(), n)) {
            records.push(CacheRecord { prompt, n, completions });
        }
    };
    let max_p = c.cache_for_p.iter().copied().max().unwrap_or(0);
    for ((artifact, sample), plan) in artifacts.iter().zip(samples).zip(implicit_plan) {
        let candidates: Vec<String> = match plan {
            Some((answer, _)) => {
                let majority = c.u / 2 + 1;
                let others: Vec<&str> = TRAITS.iter().copied().filter(|t| t != answer).collect();
                let mut v: Vec<String> = vec![answer.clone(); majority];
                for _ in majority..c.u {
                    v.push(others.choose(rng).expect("traits").to_string());
                }
                v.shuffle(rng);
                v
            }
            None => (0..c.u).map(|_| NOISE.choose(rng).expect("noise").to_string()).collect(),
        };
        let retrieved = if max_p > 0 {
            retrieve_tags(artifact, tags, max_p, Aggregation::GlobalMax)?
        } else {
            Vec::new()
        };
        for &p in &c.cache_for_p {
            let names: Vec<&str> = retrieved.iter().take(p).map(|(t, _)| t.as_str()).collect();
            let prompt = build_context_prompt(&artifact.caption, &names, &sample.question)
                .map_err(crate::oracle::OracleError::from)?;
            push(&mut records, prompt, c.u, candidates.clone());
        }
        for cand in &candidates {
            let prompt = build_explanation_prompt(&sample.question, cand).map_err(crate::oracle::OracleError::from)?;
            let explanation = match plan {
                Some((_, tag)) => format!("people link the {tag} with {cand}"),
                None => "there is no clear reason".to_string(),
            };
            push(&mut records, prompt, 1, vec![explanation]);
        }
    }
    Ok(records)
}

impl SynDataset {
    /// Writes every artifact under `dir` in the formats the loaders read.
    pub fn write(&self, dir: &Path) -> Result<SynPaths, SynError> {
        let paths = SynPaths::in_dir(dir);
        fs::create_dir_all(&paths.regions)?;
        let mut kb_text = String::new();
        for e in &self.kb {
            let line = serde_json::json!({
                "entity": e.entity,
                "description": e.description,
                "category": e.category,
            });
            kb_text.push_str(&line.to_string());
            kb_text.push('\n');
        }
        fs::write(&paths.kb, kb_text)?;
        rvem::write_raw(&paths.kb_embeddings, self.kb_embeddings.dim(), self.kb_embeddings.as_flat(), None)?;
        fs::write(&paths.tags, self.tags.join("\n") + "\n")?;
        rvem::write_raw(&paths.tag_embeddings, self.tag_embeddings.dim(), self.tag_embeddings.as_flat(), None)?;
        for a in &self.artifacts {
            write_region_artifact(&paths.regions, a)?;
        }
        fs::write(&paths.samples, jsonl(&self.samples))?;
        fs::write(&paths.labels, jsonl(&self.labels))?;
        write_cache_records(&paths.cache, &self.cache)?;
        Ok(paths)
    }

    pub fn label(&self, sample_id: &str) -> Option<&PlantingLabel> {
        self.labels.iter().find(|l| l.sample_id == sample_id)
    }
}

pub fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    out
}

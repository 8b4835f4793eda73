//! Per-sample retrieval records and their conversion to model input.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FusionFlags, PipelineConfig, QuestionMode};
use super::{read_jsonl, require, PipelineError};
use crate::eval::QASample;
use crate::fusion::{FusionInput, FusionModel, TrainingExample, Vocab};
use crate::kb::{load_kb_indexed, load_tags, KnowledgeEntry};
use crate::oracle::{retrieve_implicit, ImplicitCandidate, Oracle};
use crate::prompts::{build_context_prompt, build_explicit_passage, build_implicit_passage};
use crate::regions::{
    load_region_artifacts, retrieve_explicit, retrieve_tags, KnowledgeStore, RegionArtifact, TagStore,
};
use crate::rvem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTag {
    pub tag: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entity: String,
    pub description: String,
    pub category: String,
    pub score: f64,
}

/// Everything retrieved for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub sample_id: String,
    pub image_id: String,
    pub question: String,
    pub caption: String,
    pub tags: Vec<ScoredTag>,
    pub explicit: Vec<ScoredEntry>,
    /// Context-aware prompt sent to the oracle.
    pub prompt_x: String,
    pub implicit: Vec<ImplicitCandidate>,
}

/// Loaded and validated stage inputs.
#[derive(Debug, Clone)]
pub struct Resources {
    pub kb: KnowledgeStore,
    pub tags: TagStore,
    pub artifacts: BTreeMap<String, RegionArtifact>,
    /// Sorted by sample id.
    pub samples: Vec<QASample>,
}

impl Resources {
    pub fn artifact(&self, image_id: &str) -> Result<&RegionArtifact, PipelineError> {
        self.artifacts.get(image_id).ok_or_else(|| PipelineError::Config(format!(
            "no region artifact for image {image_id}"
        )))
    }
}

pub fn load_samples(path: &Path) -> Result<Vec<QASample>, PipelineError> {
    let mut samples: Vec<QASample> = read_jsonl(path, "QA samples")?;
    for s in &samples {
        s.validate()?;
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    if let Some(w) = samples.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
        return Err(crate::eval::EvalError::DuplicateSample(w[0].sample_id.clone()).into());
    }
    Ok(samples)
}

pub fn load_artifacts(config: &PipelineConfig) -> Result<BTreeMap<String, RegionArtifact>, PipelineError> {
    let dir = &config.paths.regions;
    require(dir, "region artifact directory")?;
    let list = load_region_artifacts(dir, config.retrieval.region_norm)?;
    let mut map = BTreeMap::new();
    for a in list {
        if map.contains_key(&a.image_id) {
            return Err(PipelineError::Format {
                path: dir.clone(),
                msg: format!("image {} appears twice", a.image_id),
            });
        }
        map.insert(a.image_id.clone(), a);
    }
    Ok(map)
}

pub fn load_resources(config: &PipelineConfig) -> Result<Resources, PipelineError> {
    let p = &config.paths;
    require(&p.kb, "knowledge base")?;
    require(&p.kb_embeddings, "knowledge-base embeddings")?;
    require(&p.tags, "tag vocabulary")?;
    require(&p.tag_embeddings, "tag embeddings")?;

    let indexed = load_kb_indexed(&p.kb, &config.retrieval.categories)?;
    let kb_matrix = rvem::read_matrix(&p.kb_embeddings)?;
    let rows: Vec<usize> = indexed.iter().map(|(i, _)| *i).collect();
    let entries: Vec<KnowledgeEntry> = indexed.into_iter().map(|(_, e)| e).collect();
    if let Some(&bad) = rows.iter().find(|&&r| r >= kb_matrix.len()) {
        return Err(PipelineError::Format {
            path: p.kb_embeddings.clone(),
            msg: format!("{} rows, but knowledge base line {bad} needs one", kb_matrix.len()),
        });
    }
    let kb = KnowledgeStore::new(
        entries,
        kb_matrix.select_rows(&rows).map_err(crate::regions::RegionError::from)?,
    )?;
    let tags = TagStore::new(&load_tags(&p.tags)?, rvem::read_matrix(&p.tag_embeddings)?)?;
    let artifacts = load_artifacts(config)?;
    let samples = load_samples(&p.samples)?;
    for s in &samples {
        if !artifacts.contains_key(&s.image_id) {
            return Err(PipelineError::Missing {
                artifact: format!("region artifact for image {} (sample {})", s.image_id, s.sample_id),
                path: p.regions.join(format!("{}.json", s.image_id)),
            });
        }
    }
    Ok(Resources {
        kb,
        tags,
        artifacts,
        samples,
    })
}

/// Tags, explicit entries, context prompt and oracle candidates for one sample.
pub fn retrieve_sample(
    config: &PipelineConfig,
    res: &Resources,
    sample: &QASample,
    oracle: &dyn Oracle,
) -> Result<RetrievalRecord, PipelineError> {
    let r = &config.retrieval;
    let artifact = res.artifact(&sample.image_id)?;
    let tags = retrieve_tags(artifact, &res.tags, r.p, r.aggregation)?;
    let explicit = retrieve_explicit(artifact, &res.kb, r.k, r.aggregation)?;
    let names: Vec<&str> = tags.iter().map(|(t, _)| t.as_str()).collect();
    let prompt_x = build_context_prompt(&artifact.caption, &names, &sample.question)?;
    let implicit = retrieve_implicit(oracle, &prompt_x, &sample.question, r.u).map_err(|source| {
        PipelineError::Implicit {
            sample_id: sample.sample_id.clone(),
            source,
        }
    })?;
    Ok(RetrievalRecord {
        sample_id: sample.sample_id.clone(),
        image_id: sample.image_id.clone(),
        question: sample.question.clone(),
        caption: artifact.caption.clone(),
        tags: tags.into_iter().map(|(tag, score)| ScoredTag { tag, score }).collect(),
        explicit: explicit
            .into_iter()
            .map(|(e, score)| ScoredEntry {
                entity: e.entity,
                description: e.description,
                category: e.category,
                score,
            })
            .collect(),
        prompt_x,
        implicit,
    })
}

/// Model input for a record under the given source flags. Regions beyond
/// the model's `max_regions` are dropped later, at tokenization.
pub fn build_fusion_input(
    record: &RetrievalRecord,
    artifact: Option<&RegionArtifact>,
    flags: &FusionFlags,
) -> Result<FusionInput, PipelineError> {
    let explicit = if flags.explicit {
        record
            .explicit
            .iter()
            .map(|e| build_explicit_passage(&KnowledgeEntry::new(&e.entity, &e.description, &e.category)))
            .collect()
    } else {
        Vec::new()
    };
    let implicit = if flags.implicit {
        record
            .implicit
            .iter()
            .map(|c| build_implicit_passage(&c.answer, &c.explanation))
            .collect()
    } else {
        Vec::new()
    };
    let (region_embeddings, boxes) = match (flags.visual, artifact) {
        (true, Some(a)) => (a.region_embeddings.clone(), a.normalized_boxes()),
        _ => (Vec::new(), Vec::new()),
    };
    let question = match flags.question {
        QuestionMode::Plain => record.question.clone(),
        QuestionMode::Context => build_context_prompt::<&str>(&record.caption, &[], &record.question)?,
        QuestionMode::ContextTags => record.prompt_x.clone(),
    };
    Ok(FusionInput {
        explicit,
        implicit,
        region_embeddings,
        boxes,
        question,
    })
}

/// Vocabulary over every text the model can see plus the training targets.
pub fn build_vocab(records: &[RetrievalRecord], targets: &[String]) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    for r in records {
        texts.push(r.prompt_x.clone());
        texts.push(r.question.clone());
        texts.push(r.caption.clone());
        for e in &r.explicit {
            texts.push(build_explicit_passage(&KnowledgeEntry::new(&e.entity, &e.description, &e.category)).text);
        }
        for c in &r.implicit {
            texts.push(build_implicit_passage(&c.answer, &c.explanation).text);
        }
    }
    texts.extend(targets.iter().cloned());
    Vocab::build(texts.iter().map(String::as_str))
}

/// Training examples for the given sample/record pairs.
pub fn build_examples(
    model: &FusionModel,
    pairs: &[(&QASample, &RetrievalRecord)],
    artifacts: &BTreeMap<String, RegionArtifact>,
    flags: &FusionFlags,
) -> Result<Vec<TrainingExample>, PipelineError> {
    pairs
        .iter()
        .map(|(s, r)| {
            let input = build_fusion_input(r, artifacts.get(&r.image_id), flags)?;
            Ok(TrainingExample {
                input: model.tokenize_input(&input)?,
                target: model.answer_ids(&s.training_target()),
            })
        })
        .collect()
}

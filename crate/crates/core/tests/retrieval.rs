mod common;

use common::{brute_force_topk, random_rows};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionqa::kb::{default_categories, TagEntry};
use regionqa::regions::{retrieve_explicit, retrieve_tags, KnowledgeStore, RegionArtifact, TagStore};
use regionqa::syndata::{self, SynConfig};
use regionqa::vecindex::{Aggregation, EmbeddingMatrix, Index};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

#[test]
fn single_query_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = random_rows(&mut rng, 1000, 64);
    let index = Index::build(EmbeddingMatrix::with_row_ids(64, rows.clone()).unwrap());
    for _ in 0..10 {
        let q = random_rows(&mut rng, 1, 64).remove(0);
        let got: Vec<(String, f64)> = index.topk(&q, 10).unwrap().into_iter().map(|h| (h.item_id, h.score)).collect();
        assert_eq!(got, brute_force_topk(&rows, &ids(1000), &[q], 10));
    }
}

#[test]
fn multi_query_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = random_rows(&mut rng, 500, 32);
    let index = Index::build(EmbeddingMatrix::with_row_ids(32, rows.clone()).unwrap());
    let queries = random_rows(&mut rng, 20, 32);
    let qm = EmbeddingMatrix::with_row_ids(32, queries.clone()).unwrap();
    let got: Vec<String> = index.multi_query_topk(&qm, 15).unwrap().into_iter().map(|h| h.item_id).collect();
    let want: Vec<String> = brute_force_topk(&rows, &ids(500), &queries, 15).into_iter().map(|x| x.0).collect();
    assert_eq!(got, want);
}

#[test]
fn duplicate_rows_tie_break_by_id() {
    let row = vec![0.5f32, 0.5];
    let rows = vec![row.clone(), vec![0.0, 1.0], row.clone(), row.clone()];
    let names: Vec<String> = ["d", "a", "c", "b"].iter().map(|s| s.to_string()).collect();
    let index = Index::build(EmbeddingMatrix::new(2, rows.clone(), names.clone()).unwrap());
    let got: Vec<String> = index.topk(&[1.0, 0.0], 3).unwrap().into_iter().map(|h| h.item_id).collect();
    assert_eq!(got, ["b", "c", "d"]);
    let want: Vec<String> = brute_force_topk(&rows, &names, &[vec![1.0, 0.0]], 3).into_iter().map(|x| x.0).collect();
    assert_eq!(got, want);
}

fn syn_stores() -> (syndata::SynDataset, KnowledgeStore, TagStore) {
    let d = syndata::generate(&SynConfig {
        n_samples: 8,
        kb_size: 300,
        ..SynConfig::default()
    })
    .unwrap();
    let cats = default_categories();
    let kept: Vec<usize> = (0..d.kb.len()).filter(|&r| cats.contains(&d.kb[r].category)).collect();
    let kb = KnowledgeStore::new(
        kept.iter().map(|&r| d.kb[r].clone()).collect(),
        d.kb_embeddings.select_rows(&kept).unwrap(),
    )
    .unwrap();
    let tags: Vec<TagEntry> = d.tags.iter().map(|t| TagEntry { tag: t.clone(), embedding: None }).collect();
    let ts = TagStore::new(&tags, d.tag_embeddings.clone()).unwrap();
    (d, kb, ts)
}

#[test]
fn forty_distinct_entries_from_thirty_six_regions() {
    let (_, kb, _) = syn_stores();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let artifact = RegionArtifact {
        image_id: "img".into(),
        boxes: vec![[0.0, 0.0, 10.0, 10.0]; 36],
        image_size: (10, 10),
        embedding_dim: 64,
        region_embeddings: random_rows(&mut rng, 36, 64),
        caption: "c".into(),
    };
    let hits = retrieve_explicit(&artifact, &kb, 40, Aggregation::GlobalMax).unwrap();
    assert_eq!(hits.len(), 40);
    let mut names: Vec<&str> = hits.iter().map(|(e, _)| e.entity.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 40);
    let single = kb.index().topk(&artifact.region_embeddings[0], 40).unwrap();
    assert_eq!(single.len(), 40);
}

#[test]
fn tag_retrieval_matches_region_tag_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tag_rows = random_rows(&mut rng, 50, 16);
    let names: Vec<String> = (0..50).map(|i| format!("tag{i}")).collect();
    let entries: Vec<TagEntry> = names.iter().map(|t| TagEntry { tag: t.clone(), embedding: None }).collect();
    let store = TagStore::new(&entries, EmbeddingMatrix::with_row_ids(16, tag_rows.clone()).unwrap()).unwrap();
    let regions = random_rows(&mut rng, 5, 16);
    let artifact = RegionArtifact {
        image_id: "img".into(),
        boxes: vec![[0.0, 0.0, 1.0, 1.0]; 5],
        image_size: (4, 4),
        embedding_dim: 16,
        region_embeddings: regions.clone(),
        caption: "c".into(),
    };
    let got = retrieve_tags(&artifact, &store, 8, Aggregation::GlobalMax).unwrap();
    assert_eq!(got, brute_force_topk(&tag_rows, &names, &regions, 8));
}

#[test]
fn index_of_four_hundred_thousand_tags() {
    let (n, dim) = (400_000usize, 512usize);
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let data: Vec<f32> = (0..n * dim)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .collect();
    let matrix = EmbeddingMatrix::from_flat(dim, data, ids(n)).unwrap();
    let probe = matrix.row(123_456).to_vec();
    let index = Index::build(matrix);
    assert_eq!(index.len(), n);
    let hit = &index.topk(&probe, 1).unwrap()[0];
    assert_eq!(hit.item_id, "123456");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multi_query_is_sorted_distinct_and_sized(seed in any::<u64>(), n in 1usize..60, q in 1usize..6, k in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(1..9);
        let rows = random_rows(&mut rng, n, dim);
        let index = Index::build(EmbeddingMatrix::with_row_ids(dim, rows).unwrap());
        let qm = EmbeddingMatrix::with_row_ids(dim, random_rows(&mut rng, q, dim)).unwrap();
        for agg in [Aggregation::GlobalMax, Aggregation::PerQuery] {
            let hits = index.multi_query_topk_with(&qm, k, agg).unwrap();
            prop_assert_eq!(hits.len(), k.min(n));
            let mut seen: Vec<&str> = hits.iter().map(|h| h.item_id.as_str()).collect();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), hits.len());
            if agg == Aggregation::GlobalMax {
                prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }
    }
}

//! Region-level retrieval: every region embedding queries the tag index and
//! the knowledge index, and scores are max-aggregated across regions.

use regionqa::kb::{KnowledgeEntry, TagEntry};
use regionqa::regions::{retrieve_explicit, retrieve_tags, stub_embed, KnowledgeStore, RegionArtifact, TagStore};
use regionqa::vecindex::{Aggregation, EmbeddingMatrix};

const DIM: usize = 32;

fn main() {
    let tags = ["dog", "frisbee", "beach", "umbrella", "car", "kite"];
    let tag_store = TagStore::new(
        &tags.map(|t| TagEntry { tag: t.into(), embedding: None }),
        EmbeddingMatrix::new(DIM, tags.iter().map(|t| stub_embed(t, DIM)).collect(), tags.map(String::from).to_vec()).unwrap(),
    )
    .unwrap();

    let entries = vec![
        KnowledgeEntry::new("border collie", "dog breed used for herding sheep", "Animal"),
        KnowledgeEntry::new("frisbee", "flying disc used for catch games", "Object"),
        KnowledgeEntry::new("parasol", "umbrella used for shade from the sun", "Object"),
        KnowledgeEntry::new("sedan", "passenger car with a separate trunk", "Vehicle"),
    ];
    // Each entry is embedded under the tag a region would be matched to.
    let kb_rows = ["dog", "frisbee", "umbrella", "car"].iter().map(|k| stub_embed(k, DIM)).collect();
    let kb = KnowledgeStore::new(entries, EmbeddingMatrix::with_row_ids(DIM, kb_rows).unwrap()).unwrap();

    // Two regions whose stub embeddings coincide with "dog" and "frisbee".
    let artifact = RegionArtifact {
        image_id: "beach_0001".into(),
        boxes: vec![[40.0, 200.0, 300.0, 460.0], [320.0, 80.0, 400.0, 140.0]],
        image_size: (640, 480),
        embedding_dim: DIM,
        region_embeddings: vec![stub_embed("dog", DIM), stub_embed("frisbee", DIM)],
        caption: "a dog catching a disc on the sand".into(),
    };

    println!("top-3 tags:");
    for (tag, score) in retrieve_tags(&artifact, &tag_store, 3, Aggregation::GlobalMax).unwrap() {
        println!("  {score:+.4}  {tag}");
    }
    println!("top-2 knowledge entries:");
    for (entry, score) in retrieve_explicit(&artifact, &kb, 2, Aggregation::GlobalMax).unwrap() {
        println!("  {score:+.4}  {}: {}", entry.entity, entry.description);
    }
}

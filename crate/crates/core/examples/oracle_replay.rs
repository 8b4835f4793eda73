//! Record once against a (mock) language model, then replay offline.

use regionqa::oracle::{retrieve_implicit, CacheRecord, MockOracle, Oracle, ReplayCache};
use regionqa::prompts::build_context_prompt;

fn main() {
    let question = "what is this animal known for?";
    let prompt_x = build_context_prompt("a dog on a field", &["dog", "grass"], question).unwrap();

    let mut mock = MockOracle::new();
    mock.insert(prompt_x.clone(), ["loyalty", "herding", "loyalty"].map(String::from).to_vec());
    mock.insert(format!("{question} loyalty. This is because"), vec!["dogs stay by their owners".into()]);
    mock.insert(format!("{question} herding. This is because"), vec!["some breeds move sheep".into()]);

    let dir = std::env::temp_dir().join("regionqa_oracle_replay");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cache.jsonl");
    let _ = std::fs::remove_file(&path);

    // Recording: misses go to the mock and are appended to the cache file.
    let recorder = ReplayCache::open(&path, Some(Box::new(mock.clone()))).unwrap();
    let recorded = retrieve_implicit(&recorder, &prompt_x, question, 3).unwrap();
    println!("recorded {} entries, {} oracle calls", recorder.len(), mock.calls());
    drop(recorder);

    // Replay: no inner oracle, so any miss is an error.
    let replay = ReplayCache::open(&path, None).unwrap();
    let replayed = retrieve_implicit(&replay, &prompt_x, question, 3).unwrap();
    assert_eq!(recorded, replayed);
    for c in &replayed {
        println!("  {:<8} <- {}", c.answer, c.explanation);
    }
    println!("replay hits {}, misses {}", replay.hits(), replay.misses());
    assert!(replay.complete("unseen prompt", 1).is_err());

    let offline = ReplayCache::in_memory(
        vec![CacheRecord { prompt: "p".into(), n: 1, completions: vec!["x".into()] }],
        None,
    );
    println!("in-memory cache answers {:?}", offline.complete("p", 1).unwrap());
}

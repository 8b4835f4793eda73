//! Text templates for the oracle prompt and the three passage kinds.

use regionqa::kb::KnowledgeEntry;
use regionqa::prompts::{
    build_context_prompt, build_explanation_prompt, build_explicit_passage, build_implicit_passage, question_passage,
};

fn main() {
    let prompt_x = build_context_prompt(
        "a man riding a wave on top of a surfboard",
        &["surfboard", "wave", "wetsuit"],
        "what is the man doing?",
    )
    .unwrap();
    println!("context prompt:     {prompt_x}");
    println!("no-tag prompt:      {}", build_context_prompt::<&str>("a red bus", &[], "where is it going?").unwrap());
    println!("explanation prompt: {}", build_explanation_prompt("what is the man doing?", "surfing").unwrap());

    let entry = KnowledgeEntry::new("surfboard", "board used for riding waves", "Object");
    for p in [
        build_explicit_passage(&entry),
        build_implicit_passage("surfing", "he is standing on a board in the ocean"),
        question_passage(prompt_x),
    ] {
        println!("{:?}: {}", p.kind, p.text);
    }
    assert!(build_explanation_prompt("q?", "").is_err());
}

//! Synthetic dataset with answers planted in one channel per sample.

use regionqa::syndata::{self, ChannelMix, SynConfig};

fn main() {
    let config = SynConfig {
        n_samples: 6,
        mix: ChannelMix::default(),
        test_fraction: 0.34,
        ..SynConfig::default()
    };
    let data = syndata::generate(&config).unwrap();
    println!(
        "kb {} entries, {} tags, {} images, {} cache records",
        data.kb.len(),
        data.tags.len(),
        data.artifacts.len(),
        data.cache.len()
    );
    for (s, l) in data.samples.iter().zip(&data.labels) {
        println!(
            "{} {:<7} {:<10} {:<34} -> {:<10} via {}",
            s.sample_id,
            s.split.as_deref().unwrap_or("train"),
            format!("{:?}", l.channel),
            s.question,
            l.answer,
            l.source
        );
    }
    let dir = std::env::temp_dir().join("regionqa_syndata");
    let paths = data.write(&dir).unwrap();
    println!("written to {}", paths.samples.parent().unwrap().display());
}

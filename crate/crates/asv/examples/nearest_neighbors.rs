//! Trains briefly on a themed corpus and retrieves nearest neighbors by
//! cosine over the frozen sentence vectors.
//!
//! ```bash
//! cargo run -p asv --example nearest_neighbors
//! ```

use asv::config::TrainConfig;
use asv::corpus::{read_corpus, Vocabulary};
use asv::eval::nearest_neighbors;
use asv::trainer::train;

const THEMES: &[&str] = &[
    "the cat sat on the mat",
    "a cat slept in the sun",
    "the dog ran in the park",
    "a dog barked at the door",
    "fish swim in the cold river",
    "fish live deep in the sea",
    "the train left the old station",
    "a train crossed the long bridge",
];

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus_path = dir.path().join("corpus.txt");
    let mut text = String::new();
    for _ in 0..40 {
        for line in THEMES {
            text.push_str(line);
            text.push('\n');
        }
    }
    std::fs::write(&corpus_path, &text).expect("write");

    let sentences = read_corpus(&corpus_path).expect("read");
    let vocab = Vocabulary::build(sentences.into_iter().flatten(), 60).expect("vocab");
    let cfg = TrainConfig::parse(
        "d_e=16\nd_h_dir=12\nn=5\nbatch_size=32\nchannels=24,24\nmax_src_len=8\nlr=0.002\nsteps=300\nseed=3\n",
    )
    .expect("config");
    let ckpt = dir.path().join("m.ckpt");
    let mut log = Vec::new();
    let model = train(&corpus_path, &vocab, &cfg, &ckpt, None, &mut log).expect("train");

    let unique = dir.path().join("unique.txt");
    std::fs::write(&unique, THEMES.join("\n")).expect("write unique");

    for query in ["the cat slept on the mat", "a train left the bridge"] {
        println!("query: {query}");
        for (idx, sentence, cos) in
            nearest_neighbors(&model, &vocab, query, &unique, 3).expect("nn")
        {
            println!("  {cos:+.4}  [{idx}] {sentence}");
        }
    }
}

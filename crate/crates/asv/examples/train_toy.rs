//! End-to-end training on a tiny embedded corpus: build a vocabulary,
//! train the predict-all-words CNN model for a few hundred steps, save a
//! checkpoint, reload it and encode some sentences.
//!
//! ```bash
//! cargo run -p asv --example train_toy
//! ```

use asv::checkpoint;
use asv::config::TrainConfig;
use asv::corpus::{read_corpus, Vocabulary};
use asv::eval::encode_sentence;
use asv::trainer::train;

const CORPUS: &str = "\
the cat sat on the warm mat
a small dog ran down the road
the dog chased the cat today
birds fly high over the water
the cat slept near the window
a bird landed on the old fence
the dog slept under the table
fish swim deep in the cold water
";

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus_path = dir.path().join("corpus.txt");
    // repeat the corpus so every sentence has a long continuation
    let mut text = String::new();
    for _ in 0..40 {
        text.push_str(CORPUS);
    }
    std::fs::write(&corpus_path, text).expect("write corpus");

    let sentences = read_corpus(&corpus_path).expect("read corpus");
    let vocab = Vocabulary::build(sentences.into_iter().flatten(), 100).expect("vocab");
    println!("vocabulary: {} tokens", vocab.len());

    let cfg = TrainConfig::parse(
        "d_e=16\nd_h_dir=12\nn=5\nbatch_size=16\nchannels=24,24\nmax_src_len=10\n\
         lr=0.002\nsteps=400\nseed=1\n",
    )
    .expect("config");

    let ckpt_path = dir.path().join("toy.ckpt");
    let mut log = Vec::new();
    train(&corpus_path, &vocab, &cfg, &ckpt_path, None, &mut log).expect("train");

    let lines: Vec<&str> = std::str::from_utf8(&log).unwrap().lines().collect();
    println!("loss trajectory (per position):");
    for idx in [0, 50, 100, 200, 399] {
        let (step, loss) = lines[idx].split_once('\t').unwrap();
        let per_pos: f32 = loss.parse::<f32>().unwrap() / cfg.n as f32;
        println!("  step {step:>4}: {per_pos:.4}");
    }

    let ck = checkpoint::load(&ckpt_path).expect("load checkpoint");
    println!("reloaded checkpoint at step {}", ck.step);
    for sent in ["the cat sat", "a small dog ran", "fish swim in the water"] {
        let z = encode_sentence(&ck.model, &ck.vocab, sent).expect("encode");
        println!(
            "  {sent:<24} -> {}-dim vector, first entries {:.4} {:.4} {:.4}",
            z.len(),
            z[0],
            z[1],
            z[2]
        );
    }
}

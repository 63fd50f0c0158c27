//! Vocabulary expansion: fit the linear map from pretrained vectors to the
//! learnt embedding space over the shared tokens, then synthesize
//! embeddings for words the model never saw and encode sentences that use
//! them.
//!
//! ```bash
//! cargo run -p asv --example vocab_expansion
//! ```

use asv::config::TrainConfig;
use asv::corpus::{read_corpus, Vocabulary};
use asv::eval::{cosine, encode_sentence};
use asv::expand::{expand_vocabulary, fit_linear_map, load_pretrained_text};
use asv::trainer::train;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus_path = dir.path().join("corpus.txt");
    let mut text = String::new();
    for _ in 0..30 {
        text.push_str("the cat chased the mouse\nthe dog chased the cat\n");
        text.push_str("a mouse hid under the table\nthe dog slept by the door\n");
    }
    std::fs::write(&corpus_path, &text).expect("write corpus");

    let sentences = read_corpus(&corpus_path).expect("read");
    let mut vocab = Vocabulary::build(sentences.into_iter().flatten(), 50).expect("vocab");
    let cfg = TrainConfig::parse(
        "d_e=10\nd_h_dir=8\nn=4\nbatch_size=16\nchannels=16,16\nmax_src_len=8\nlr=0.002\nsteps=200\nseed=2\n",
    )
    .expect("config");
    let ckpt = dir.path().join("m.ckpt");
    let mut log = Vec::new();
    let mut model = train(&corpus_path, &vocab, &cfg, &ckpt, None, &mut log).expect("train");

    // a fake pretrained table: shared words plus two unseen ones whose
    // vectors sit close to the shared words they should behave like
    let pre_path = dir.path().join("pretrained.txt");
    let pretrained = "\
cat 1.0 0.1 0.0\n\
dog 0.9 0.2 0.1\n\
mouse 0.8 0.0 0.2\n\
table 0.0 1.0 0.3\n\
door 0.1 0.9 0.4\n\
kitten 0.95 0.1 0.05\n\
window 0.05 0.95 0.35\n";
    std::fs::write(&pre_path, pretrained).expect("write pretrained");

    let pre = load_pretrained_text(&pre_path).expect("parse pretrained");
    let map = fit_linear_map(&pre, &model.embedding, &vocab).expect("fit");
    println!(
        "fitted {}x{} map over {} shared tokens, residual {:.4}",
        map.d_e, map.d_pre, map.shared_tokens, map.residual
    );

    let before = vocab.len();
    let added = expand_vocabulary(&map, &pre, &mut vocab, &mut model).expect("expand");
    println!("vocabulary {before} -> {} tokens (+{added})", vocab.len());
    assert!(vocab.id("kitten").is_some());

    // the synthesized "kitten" should read like "cat", not like "window"
    let z_kitten = encode_sentence(&model, &vocab, "the kitten chased the mouse").unwrap();
    let z_cat = encode_sentence(&model, &vocab, "the cat chased the mouse").unwrap();
    let z_window = encode_sentence(&model, &vocab, "the window chased the mouse").unwrap();
    println!(
        "cosine(kitten-sentence, cat-sentence)    = {:.4}",
        cosine(&z_kitten, &z_cat).unwrap()
    );
    println!(
        "cosine(kitten-sentence, window-sentence) = {:.4}",
        cosine(&z_kitten, &z_window).unwrap()
    );
}

//! Runs one identical batch through all four decoder variants (and the
//! three input-sampling strategies of the autoregressive ones), showing
//! that every variant feeds the same tied prediction head: same feature
//! shape, same loss scale at initialization.
//!
//! ```bash
//! cargo run -p asv --example decoder_variants
//! ```

use asv::config::TrainConfig;
use asv::corpus::{Batch, TrainingPair};
use asv::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let vocab = 40usize;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<TrainingPair> = (0..8)
        .map(|_| TrainingPair {
            source: (0..rng.gen_range(2..7usize))
                .map(|_| rng.gen_range(3..vocab))
                .collect(),
            target: (0..6).map(|_| rng.gen_range(3..vocab)).collect(),
        })
        .collect();
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let batch = Batch::from_pairs(&refs).expect("batch");

    let uniform = (vocab as f32).ln() * 6.0;
    println!("per-pair loss at random initialization (uniform would be {uniform:.3}):");
    let variants = [
        ("paw_cnn", "none"),
        ("paw_rnn", "none"),
        ("ar_rnn", "teacher_forcing"),
        ("ar_rnn", "always_sampling"),
        ("ar_rnn", "uniform_sampling"),
        ("ar_cnn", "teacher_forcing"),
        ("ar_cnn", "always_sampling"),
        ("ar_cnn", "uniform_sampling"),
    ];
    for (decoder, sampling) in variants {
        let channels = match decoder {
            "ar_rnn" => "20",
            "paw_rnn" => "20,10",
            _ => "20,24",
        };
        let cfg = TrainConfig::parse(&format!(
            "d_e=12\nd_h_dir=10\nn=6\nmax_src_len=8\ndecoder={decoder}\nchannels={channels}\nsampling={sampling}\n"
        ))
        .expect("config")
        .model_config(vocab);
        let model = Model::<f32>::init(cfg, 5).expect("model");
        let mut srng = ChaCha8Rng::seed_from_u64(77);
        let (g, _, loss) = model
            .loss_graph(&batch, Some(&mut srng))
            .expect("loss graph");
        println!(
            "  {decoder:<8} {sampling:<18} loss {:>7.4}   ({} parameters)",
            g.value(loss).data()[0],
            model.param_count()
        );
    }
}

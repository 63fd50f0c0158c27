//! Wall-clock comparison of one training step across decoder variants at
//! matched dimensions. The predict-all-words CNN does its work in a few
//! large matrix multiplies; the autoregressive GRU has to walk the target
//! one position at a time.
//!
//! ```bash
//! cargo run --release -p asv --example decoder_speed
//! ```

use std::time::Instant;

use asv::adam::AdamConfig;
use asv::config::TrainConfig;
use asv::corpus::{Batch, TrainingPair};
use asv::model::Model;
use asv::trainer::{init_adam_states, train_step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(b: usize, n: usize, vocab: usize, max_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<TrainingPair> = (0..b)
        .map(|_| TrainingPair {
            source: (0..rng.gen_range(max_len / 2..=max_len))
                .map(|_| rng.gen_range(3..vocab))
                .collect(),
            target: (0..n).map(|_| rng.gen_range(3..vocab)).collect(),
        })
        .collect();
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    Batch::from_pairs(&refs).unwrap()
}

fn mean_step_seconds(config_text: &str, vocab: usize, steps: usize, warmup: usize) -> f64 {
    let cfg = TrainConfig::parse(config_text).unwrap();
    let mut model = Model::<f32>::init(cfg.model_config(vocab), 42).unwrap();
    let mut states = init_adam_states(&model);
    let adam = AdamConfig::with_lr(cfg.lr);
    let batch = random_batch(cfg.batch_size, cfg.n, vocab, cfg.max_src_len, 7);
    for i in 0..warmup {
        train_step(&mut model, &batch, &mut states, &adam, i as u64, "warmup").unwrap();
    }
    let start = Instant::now();
    for i in 0..steps {
        train_step(&mut model, &batch, &mut states, &adam, i as u64, "timed").unwrap();
    }
    start.elapsed().as_secs_f64() / steps as f64
}

fn main() {
    let vocab = 503;
    let (steps, warmup) = (10, 2);
    let shared = "d_e=300\nd_h_dir=300\nn=30\nbatch_size=64\nmax_src_len=30\nsteps=0\n";
    let variants = [
        ("paw_cnn 600-600", format!("{shared}decoder=paw_cnn\nchannels=600,600\n")),
        ("paw_cnn 600-1200", format!("{shared}decoder=paw_cnn\nchannels=600,1200\n")),
        (
            "ar_rnn 600 (teacher forcing)",
            format!("{shared}decoder=ar_rnn\nchannels=600\nsampling=teacher_forcing\n"),
        ),
        ("paw_rnn 600-300", format!("{shared}decoder=paw_rnn\nchannels=600,300\n")),
    ];
    println!("mean wall-clock per training step over {steps} steps ({warmup} warmup):");
    for (name, text) in &variants {
        let secs = mean_step_seconds(text, vocab, steps, warmup);
        println!("  {name:<30} {:.3} s/step", secs);
    }
}

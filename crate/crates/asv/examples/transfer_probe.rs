//! Transfer evaluation on synthetic data: train on a template corpus whose
//! next words are determined by a marker pair inside each sentence, then
//! measure what a logistic probe can read out of the frozen sentence
//! vectors, against the same probe on an untrained encoder.
//!
//! ```bash
//! cargo run -p asv --example transfer_probe
//! ```

use asv::adam::AdamConfig;
use asv::config::TrainConfig;
use asv::corpus::{batchify, make_pairs, Vocabulary};
use asv::eval::LogisticProbe;
use asv::model::Model;
use asv::trainer::{epoch_shuffle_seed, init_adam_states, train_step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block(k: usize) -> Vec<String> {
    (0..8).map(|j| format!("c{:02}", (k * 11 + j * 5) % 40)).collect()
}

/// One sentence of template k: the previous template's block, then the
/// marker pair of k in family order, diluted with fillers.
fn sentence(k_prev: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let pair = k % 6;
    let (first, second) = if k < 6 {
        (format!("ma{pair}"), format!("mb{pair}"))
    } else {
        (format!("mb{pair}"), format!("ma{pair}"))
    };
    let mut s = block(k_prev);
    for _ in 0..rng.gen_range(1..3usize) {
        s.push(format!("f{:02}", rng.gen_range(0..50)));
    }
    s.push(first);
    for _ in 0..rng.gen_range(2..5usize) {
        s.push(format!("f{:02}", rng.gen_range(0..50)));
    }
    s.push(second);
    s
}

fn corpus(n: usize, seed: u64) -> (Vec<Vec<String>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..12)).collect();
    let sents = (0..n)
        .map(|i| sentence(if i == 0 { ks[n - 1] } else { ks[i - 1] }, ks[i], &mut rng))
        .collect();
    (sents, ks)
}

fn main() {
    let mut tokens: Vec<String> = (0..6).flat_map(|j| [format!("ma{j}"), format!("mb{j}")]).collect();
    tokens.extend((0..40).map(|i| format!("c{i:02}")));
    tokens.extend((0..50).map(|i| format!("f{i:02}")));
    let vocab = Vocabulary::from_tokens(tokens).expect("vocab");

    let cfg = TrainConfig::parse(
        "d_e=24\nd_h_dir=24\nn=8\nchannels=48,48\nmax_src_len=20\nlr=0.001\nbatch_size=32\nseed=5\n",
    )
    .expect("config");
    let (sents, _) = corpus(1200, 99);
    let pairs = make_pairs(&sents, &vocab, cfg.n, cfg.max_src_len).expect("pairs");
    let mut model = Model::<f32>::init(cfg.model_config(vocab.len()), cfg.seed).expect("model");
    let mut states = init_adam_states(&model);
    let adam = AdamConfig::with_lr(cfg.lr);
    let bpe = pairs.len().div_ceil(cfg.batch_size) as u64;
    println!("training on {} pairs...", pairs.len());
    for step in 0..1500u64 {
        let batches =
            batchify(&pairs, cfg.batch_size, epoch_shuffle_seed(cfg.seed, step / bpe)).unwrap();
        let loss = train_step(
            &mut model,
            &batches[(step % bpe) as usize],
            &mut states,
            &adam,
            step,
            "probe demo",
        )
        .expect("step");
        if step % 500 == 0 {
            println!("  step {step:>4}: per-position loss {:.4}", loss / cfg.n as f32);
        }
    }

    // probe: can a linear classifier read the marker ORDER out of z?
    let untrained = Model::<f32>::init(cfg.model_config(vocab.len()), 999).expect("model");
    let (probe_sents, probe_ks) = corpus(900, 777);
    let labels: Vec<usize> = probe_ks.iter().map(|&k| usize::from(k >= 6)).collect();
    for (name, m) in [("trained", &model), ("untrained", &untrained)] {
        let feats: Vec<Vec<f64>> = probe_sents
            .iter()
            .map(|s| {
                m.encode(&[vocab.encode(s)])
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect();
        let (xtr, xte) = feats.split_at(600);
        let (ltr, lte) = labels.split_at(600);
        let probe = LogisticProbe::fit(xtr, ltr, 2, 1e-4).expect("probe");
        let acc = xte.iter().zip(lte).filter(|(x, &y)| probe.predict(x) == y).count() as f64
            / lte.len() as f64;
        println!("{name:<9} encoder: marker-order probe accuracy {acc:.3}");
    }
}

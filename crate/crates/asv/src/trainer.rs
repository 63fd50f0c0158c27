//! The optimization loop: forward, backward, Adam, loss log and rolling
//! checkpoints, with bitwise-deterministic resumption.
//!
//! Determinism contract: batch order is a pure function of (seed, epoch),
//! the sampling stream of step k is seeded from (seed, k), and parameters
//! update in named order. Two runs with the same seed, config and corpus
//! produce identical loss logs; a resumed run continues the exact
//! sequence of the run it was split from.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{batchify, make_pairs, read_corpus, Batch, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Element;

/// splitmix64-style mix of (seed, stream tag, index) into a sub-seed.
fn mix(seed: u64, tag: u64, k: u64) -> u64 {
    let mut x = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ k.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

const TAG_SHUFFLE: u64 = 1;
const TAG_SAMPLING: u64 = 2;

pub fn epoch_shuffle_seed(seed: u64, epoch: u64) -> u64 {
    mix(seed, TAG_SHUFFLE, epoch)
}

pub fn step_sampling_seed(seed: u64, step: u64) -> u64 {
    mix(seed, TAG_SAMPLING, step)
}

pub fn init_adam_states<T: Element>(model: &Model<T>) -> Vec<AdamState<T>> {
    let mut states = Vec::new();
    model.visit_params(|_, t| states.push(AdamState::new(t.dims())));
    states
}

/// One forward + backward + Adam update over all parameters. Returns the
/// pre-update batch loss. `label` names the batch in diagnostics.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    batch: &Batch,
    states: &mut [AdamState<T>],
    adam_cfg: &AdamConfig,
    sampling_seed: u64,
    label: &str,
) -> Result<T> {
    let needs_rng = model.config.decoder.kind.is_autoregressive()
        && model.config.decoder.sampling != Some(crate::decoder::Sampling::TeacherForcing);
    let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
    let (mut g, vars, loss) = model.loss_graph(
        batch,
        if needs_rng {
            Some(&mut rng as &mut dyn rand::RngCore)
        } else {
            None
        },
    )?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss on batch {label}; aborting instead of clipping"
        )));
    }
    g.backward(loss)?;
    let ordered = Model::<T>::ordered_vars(&vars);
    if ordered.len() != states.len() {
        return Err(Error::Shape(format!(
            "{} adam states for {} parameters",
            states.len(),
            ordered.len()
        )));
    }
    let mut idx = 0;
    let mut result = Ok(());
    model.visit_params_mut(|name, param| {
        if result.is_err() {
            return;
        }
        let var = ordered[idx];
        match g.take_grad(var) {
            Some(grad_data) => {
                param.set_grad(grad_data).expect("grad dims");
            }
            None => param.zero_grad(),
        }
        result = param
            .apply_grad(|data, grad| {
                crate::adam::adam_step_slice(data, grad, &mut states[idx], adam_cfg, name)
            })
            .and_then(|_| param.check_finite(name));
        idx += 1;
    });
    result?;
    Ok(loss_value)
}

/// Where a training run starts from.
pub struct TrainStart {
    pub model: Model<f32>,
    pub states: Vec<AdamState<f32>>,
    pub step: u64,
}

/// End-to-end training over a one-sentence-per-line corpus file. Writes a
/// `step<TAB>loss` line per step to `log`, a rolling checkpoint to `out`
/// every `ckpt_every` steps, and a final checkpoint at the end.
pub fn train(
    corpus_path: &Path,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Model<f32>> {
    cfg.validate()?;
    let sentences = read_corpus(corpus_path)?;
    let pairs = make_pairs(&sentences, vocab, cfg.n, cfg.max_src_len)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "{}: corpus produced no training pairs (need continuations of at least {} tokens)",
            corpus_path.display(),
            cfg.n
        )));
    }
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = match cfg.steps {
        Some(s) => s as u64,
        None => cfg.epochs as u64 * batches_per_epoch,
    };

    let model_config = cfg.model_config(vocab.len());
    let start = match resume {
        None => {
            let model = Model::init(model_config, cfg.seed)?;
            let states = init_adam_states(&model);
            TrainStart {
                model,
                states,
                step: 0,
            }
        }
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.vocab.tokens() != vocab.tokens() {
                return Err(Error::Config(format!(
                    "{}: checkpoint vocabulary does not match the supplied one",
                    path.display()
                )));
            }
            let same = crate::config::model_config_to_kv(&ck.model.config)
                == crate::config::model_config_to_kv(&model_config);
            if !same {
                return Err(Error::Config(format!(
                    "{}: checkpoint architecture does not match the config",
                    path.display()
                )));
            }
            let states = match ck.adam {
                Some(s) => s,
                None => init_adam_states(&ck.model),
            };
            TrainStart {
                model: ck.model,
                states,
                step: ck.step,
            }
        }
    };
    let mut model = start.model;
    let mut states = start.states;
    let mut step = start.step;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);

    let mut epoch_batches: Option<(u64, Vec<Batch>)> = None;
    while step < total_steps {
        let epoch = step / batches_per_epoch;
        let idx = (step % batches_per_epoch) as usize;
        let reload = !matches!(&epoch_batches, Some((e, _)) if *e == epoch);
        if reload {
            let shuffled = batchify(&pairs, cfg.batch_size, epoch_shuffle_seed(cfg.seed, epoch))?;
            epoch_batches = Some((epoch, shuffled));
        }
        let batch = &epoch_batches.as_ref().unwrap().1[idx];
        let loss = train_step(
            &mut model,
            batch,
            &mut states,
            &adam_cfg,
            step_sampling_seed(cfg.seed, step),
            &format!("{idx} of epoch {epoch}"),
        )?;
        writeln!(log, "{step}\t{loss}")
            .map_err(|e| Error::io("loss log", e))?;
        step += 1;
        if step % cfg.ckpt_every as u64 == 0 && step < total_steps {
            checkpoint::save(out, &model, vocab, step, Some(&states))?;
        }
    }
    checkpoint::save(out, &model, vocab, step, Some(&states))?;
    Ok(model)
}

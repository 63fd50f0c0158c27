//! The full encoder-decoder model: one shared embedding matrix (used both
//! to embed input words and as the word-prediction layer), an encoder and a
//! decoder. Parameter tensors are reachable in a fixed named order, which
//! checkpointing, the optimizer and the gradient checker all share.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderKind, ModelConfig};
use crate::corpus::Batch;
use crate::decoder::{decode, predict_logits, sequence_nll, DecoderParams, DecoderVars};
use crate::encoder::{
    bigru_states, cnn_encode, embed_batch, pool_states, BiGruParams, CnnEncoderParams,
    EncoderParams, EncoderVars,
};
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    /// (|V|, d_e); row v is the vector of word v. Tied: this same tensor is
    /// the decoder's word-prediction matrix.
    pub embedding: Tensor<T>,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

/// Tape handles for every model parameter, in registration order.
pub struct ModelVars {
    pub embedding: Var,
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl<T: Element> Model<T> {
    /// Deterministic initialization: weights uniform in (-0.1, 0.1) drawn
    /// in named-parameter order from a ChaCha stream, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Tensor::uniform(&[config.vocab_size, config.d_e], -0.1, 0.1, &mut rng);
        let encoder = match config.encoder {
            EncoderKind::BiGru => {
                EncoderParams::BiGru(BiGruParams::init(config.d_h_dir, config.d_e, &mut rng))
            }
            EncoderKind::Cnn => EncoderParams::Cnn(CnnEncoderParams::init(
                &config.cnn_channels,
                config.d_e,
                &mut rng,
            )),
        };
        let decoder =
            DecoderParams::init(&config.decoder, config.rep_dim(), config.d_e, &mut rng)?;
        Ok(Model {
            config,
            embedding,
            encoder,
            decoder,
        })
    }

    /// Visits every parameter as (name, tensor), in the fixed order shared
    /// by the optimizer and checkpoint format.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<T>)) {
        f("embedding".into(), &self.embedding);
        match &self.encoder {
            EncoderParams::BiGru(p) => {
                p.forward
                    .for_each(|n, t| f(format!("encoder.fwd.{n}"), t));
                p.backward
                    .for_each(|n, t| f(format!("encoder.bwd.{n}"), t));
            }
            EncoderParams::Cnn(p) => {
                for (i, (k, b)) in p.layers.iter().enumerate() {
                    f(format!("encoder.conv{}.w", i + 1), k);
                    f(format!("encoder.conv{}.b", i + 1), b);
                }
            }
        }
        match &self.decoder {
            DecoderParams::PawCnn {
                expand_w,
                expand_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => {
                f("decoder.expand.w".into(), expand_w);
                f("decoder.expand.b".into(), expand_b);
                f("decoder.conv2.w".into(), conv2_k);
                f("decoder.conv2.b".into(), conv2_b);
                f("decoder.conv3.w".into(), conv3_k);
                f("decoder.conv3.b".into(), conv3_b);
            }
            DecoderParams::PawRnn {
                expand_w,
                expand_b,
                forward,
                backward,
                proj_w,
                proj_b,
            } => {
                f("decoder.expand.w".into(), expand_w);
                f("decoder.expand.b".into(), expand_b);
                forward.for_each(|n, t| f(format!("decoder.fwd.{n}"), t));
                backward.for_each(|n, t| f(format!("decoder.bwd.{n}"), t));
                f("decoder.proj.w".into(), proj_w);
                f("decoder.proj.b".into(), proj_b);
            }
            DecoderParams::ArRnn {
                init_w,
                init_b,
                cell,
                out_w,
                out_b,
            } => {
                f("decoder.init.w".into(), init_w);
                f("decoder.init.b".into(), init_b);
                cell.for_each(|n, t| f(format!("decoder.cell.{n}"), t));
                f("decoder.out.w".into(), out_w);
                f("decoder.out.b".into(), out_b);
            }
            DecoderParams::ArCnn {
                zproj_w,
                zproj_b,
                conv1_k,
                conv1_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => {
                f("decoder.zproj.w".into(), zproj_w);
                f("decoder.zproj.b".into(), zproj_b);
                f("decoder.conv1.w".into(), conv1_k);
                f("decoder.conv1.b".into(), conv1_b);
                f("decoder.conv2.w".into(), conv2_k);
                f("decoder.conv2.b".into(), conv2_b);
                f("decoder.conv3.w".into(), conv3_k);
                f("decoder.conv3.b".into(), conv3_b);
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("embedding", &mut self.embedding);
        match &mut self.encoder {
            EncoderParams::BiGru(p) => {
                p.forward
                    .for_each_mut(|n, t| f(&format!("encoder.fwd.{n}"), t));
                p.backward
                    .for_each_mut(|n, t| f(&format!("encoder.bwd.{n}"), t));
            }
            EncoderParams::Cnn(p) => {
                for (i, (k, b)) in p.layers.iter_mut().enumerate() {
                    f(&format!("encoder.conv{}.w", i + 1), k);
                    f(&format!("encoder.conv{}.b", i + 1), b);
                }
            }
        }
        match &mut self.decoder {
            DecoderParams::PawCnn {
                expand_w,
                expand_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => {
                f("decoder.expand.w", expand_w);
                f("decoder.expand.b", expand_b);
                f("decoder.conv2.w", conv2_k);
                f("decoder.conv2.b", conv2_b);
                f("decoder.conv3.w", conv3_k);
                f("decoder.conv3.b", conv3_b);
            }
            DecoderParams::PawRnn {
                expand_w,
                expand_b,
                forward,
                backward,
                proj_w,
                proj_b,
            } => {
                f("decoder.expand.w", expand_w);
                f("decoder.expand.b", expand_b);
                forward.for_each_mut(|n, t| f(&format!("decoder.fwd.{n}"), t));
                backward.for_each_mut(|n, t| f(&format!("decoder.bwd.{n}"), t));
                f("decoder.proj.w", proj_w);
                f("decoder.proj.b", proj_b);
            }
            DecoderParams::ArRnn {
                init_w,
                init_b,
                cell,
                out_w,
                out_b,
            } => {
                f("decoder.init.w", init_w);
                f("decoder.init.b", init_b);
                cell.for_each_mut(|n, t| f(&format!("decoder.cell.{n}"), t));
                f("decoder.out.w", out_w);
                f("decoder.out.b", out_b);
            }
            DecoderParams::ArCnn {
                zproj_w,
                zproj_b,
                conv1_k,
                conv1_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => {
                f("decoder.zproj.w", zproj_w);
                f("decoder.zproj.b", zproj_b);
                f("decoder.conv1.w", conv1_k);
                f("decoder.conv1.b", conv1_b);
                f("decoder.conv2.w", conv2_k);
                f("decoder.conv2.b", conv2_b);
                f("decoder.conv3.w", conv3_k);
                f("decoder.conv3.b", conv3_b);
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(|n, _| names.push(n));
        names
    }

    /// Total trainable scalar count. The embedding appears once: the
    /// prediction layer shares it rather than owning a second |V| x d_e
    /// matrix.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(|_, t| count += t.len());
        count
    }

    /// Registers every parameter on the tape, in `visit_params` order.
    pub fn leaf(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            embedding: g.leaf(self.embedding.clone()),
            encoder: self.encoder.leaf(g),
            decoder: self.decoder.leaf(g),
        }
    }

    /// Sentence vectors for a batch on an existing tape.
    pub fn encode_on(&self, g: &mut Graph<T>, vars: &ModelVars, batch: &Batch) -> Var {
        let x = embed_batch(g, vars.embedding, batch);
        match &vars.encoder {
            EncoderVars::BiGru { forward, backward } => {
                let states = bigru_states(g, x, batch.lengths(), forward, backward);
                pool_states(g, states, batch.lengths(), self.config.pooling)
            }
            EncoderVars::Cnn { layers } => cnn_encode(g, x, batch.lengths(), layers),
        }
    }

    /// Encodes token-id sentences into a (B, rep_dim) matrix.
    pub fn encode(&self, sources: &[Vec<usize>]) -> Result<Tensor<T>> {
        let batch = Batch::from_sources(sources)?;
        batch.check_ids(self.config.vocab_size)?;
        if batch.width() == 0 {
            return Err(Error::EmptySentence("nothing to encode".into()));
        }
        let mut g = Graph::new();
        let vars = self.leaf(&mut g);
        let z = self.encode_on(&mut g, &vars, &batch);
        Ok(g.value(z).clone())
    }

    /// Builds the full training graph for one batch and returns the scalar
    /// loss node (per-pair sum over positions, mean over the batch).
    pub fn loss_graph(
        &self,
        batch: &Batch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Graph<T>, ModelVars, Var)> {
        batch.check_ids(self.config.vocab_size)?;
        let mut g = Graph::new();
        let vars = self.leaf(&mut g);
        let z = self.encode_on(&mut g, &vars, batch);
        let u = decode(
            &mut g,
            z,
            vars.embedding,
            batch,
            &vars.decoder,
            &self.config.decoder,
            rng,
        )?;
        let logits = predict_logits(&mut g, u, vars.embedding);
        let loss = sequence_nll(&mut g, logits, batch.targets(), batch.size())?;
        Ok((g, vars, loss))
    }

    /// Vars in `visit_params` order; used to harvest gradients.
    pub fn ordered_vars(vars: &ModelVars) -> Vec<Var> {
        let mut out = vec![vars.embedding];
        match &vars.encoder {
            EncoderVars::BiGru { forward, backward } => {
                out.extend(forward.vars());
                out.extend(backward.vars());
            }
            EncoderVars::Cnn { layers } => {
                for &(k, b) in layers {
                    out.push(k);
                    out.push(b);
                }
            }
        }
        match &vars.decoder {
            DecoderVars::PawCnn {
                expand_w,
                expand_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => out.extend([*expand_w, *expand_b, *conv2_k, *conv2_b, *conv3_k, *conv3_b]),
            DecoderVars::PawRnn {
                expand_w,
                expand_b,
                forward,
                backward,
                proj_w,
                proj_b,
            } => {
                out.extend([*expand_w, *expand_b]);
                out.extend(forward.vars());
                out.extend(backward.vars());
                out.extend([*proj_w, *proj_b]);
            }
            DecoderVars::ArRnn {
                init_w,
                init_b,
                cell,
                out_w,
                out_b,
            } => {
                out.extend([*init_w, *init_b]);
                out.extend(cell.vars());
                out.extend([*out_w, *out_b]);
            }
            DecoderVars::ArCnn {
                zproj_w,
                zproj_b,
                conv1_k,
                conv1_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => out.extend([
                *zproj_w, *zproj_b, *conv1_k, *conv1_b, *conv2_k, *conv2_b, *conv3_k, *conv3_b,
            ]),
        }
        out
    }

    /// Converts parameters to another float width; the graph structure is
    /// unchanged, so an f64 twin runs the identical computation.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let cast_gru = |p: &crate::nn::GruCellParams<T>| crate::nn::GruCellParams {
            w_z: p.w_z.cast(),
            u_z: p.u_z.cast(),
            b_z: p.b_z.cast(),
            w_r: p.w_r.cast(),
            u_r: p.u_r.cast(),
            b_r: p.b_r.cast(),
            w_h: p.w_h.cast(),
            u_h: p.u_h.cast(),
            b_h: p.b_h.cast(),
        };
        let encoder = match &self.encoder {
            EncoderParams::BiGru(p) => EncoderParams::BiGru(BiGruParams {
                forward: cast_gru(&p.forward),
                backward: cast_gru(&p.backward),
            }),
            EncoderParams::Cnn(p) => EncoderParams::Cnn(CnnEncoderParams {
                layers: p
                    .layers
                    .iter()
                    .map(|(k, b)| (k.cast(), b.cast()))
                    .collect(),
            }),
        };
        let decoder = match &self.decoder {
            DecoderParams::PawCnn {
                expand_w,
                expand_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => DecoderParams::PawCnn {
                expand_w: expand_w.cast(),
                expand_b: expand_b.cast(),
                conv2_k: conv2_k.cast(),
                conv2_b: conv2_b.cast(),
                conv3_k: conv3_k.cast(),
                conv3_b: conv3_b.cast(),
            },
            DecoderParams::PawRnn {
                expand_w,
                expand_b,
                forward,
                backward,
                proj_w,
                proj_b,
            } => DecoderParams::PawRnn {
                expand_w: expand_w.cast(),
                expand_b: expand_b.cast(),
                forward: cast_gru(forward),
                backward: cast_gru(backward),
                proj_w: proj_w.cast(),
                proj_b: proj_b.cast(),
            },
            DecoderParams::ArRnn {
                init_w,
                init_b,
                cell,
                out_w,
                out_b,
            } => DecoderParams::ArRnn {
                init_w: init_w.cast(),
                init_b: init_b.cast(),
                cell: cast_gru(cell),
                out_w: out_w.cast(),
                out_b: out_b.cast(),
            },
            DecoderParams::ArCnn {
                zproj_w,
                zproj_b,
                conv1_k,
                conv1_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => DecoderParams::ArCnn {
                zproj_w: zproj_w.cast(),
                zproj_b: zproj_b.cast(),
                conv1_k: conv1_k.cast(),
                conv1_b: conv1_b.cast(),
                conv2_k: conv2_k.cast(),
                conv2_b: conv2_b.cast(),
                conv3_k: conv3_k.cast(),
                conv3_b: conv3_b.cast(),
            },
        };
        Model {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            encoder,
            decoder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::corpus::TrainingPair;

    fn small_config(decoder: &str) -> ModelConfig {
        TrainConfig::parse(&format!(
            "d_e=4\nd_h_dir=3\nn=3\nmax_src_len=6\ndecoder={decoder}\nchannels={}\nsampling={}\n",
            match decoder {
                "ar_rnn" => "5".to_string(),
                "paw_rnn" => "5,3".to_string(),
                _ => "5,6".to_string(),
            },
            if decoder.starts_with("ar_") {
                "teacher_forcing"
            } else {
                "none"
            }
        ))
        .unwrap()
        .model_config(11)
    }

    fn small_batch() -> Batch {
        let pairs = [
            TrainingPair {
                source: vec![3, 4, 5],
                target: vec![6, 7, 3],
            },
            TrainingPair {
                source: vec![8],
                target: vec![4, 4, 9],
            },
        ];
        let refs: Vec<&TrainingPair> = pairs.iter().collect();
        Batch::from_pairs(&refs).unwrap()
    }

    #[test]
    fn param_registry_is_consistent() {
        for decoder in ["paw_cnn", "paw_rnn", "ar_rnn", "ar_cnn"] {
            let model = Model::<f32>::init(small_config(decoder), 1).unwrap();
            let names = model.param_names();
            let mut seen = names.clone();
            seen.dedup();
            assert_eq!(names.len(), seen.len(), "duplicate names for {decoder}");
            let mut g = Graph::new();
            let vars = model.leaf(&mut g);
            let ordered = Model::<f32>::ordered_vars(&vars);
            assert_eq!(ordered.len(), names.len());
            // leaves were registered in the same order they are named
            let mut idx = 0;
            model.visit_params(|_, t| {
                assert_eq!(g.value(ordered[idx]).dims(), t.dims());
                idx += 1;
            });
            // exactly one vocabulary-sized tensor: the shared embedding
            let mut vocab_sized = 0;
            model.visit_params(|_, t| {
                if t.dims().contains(&model.config.vocab_size) {
                    vocab_sized += 1;
                }
            });
            assert_eq!(vocab_sized, 1, "{decoder} must tie the prediction layer");
        }
    }

    #[test]
    fn loss_graph_runs_for_every_decoder() {
        let batch = small_batch();
        for decoder in ["paw_cnn", "paw_rnn", "ar_rnn", "ar_cnn"] {
            let model = Model::<f32>::init(small_config(decoder), 2).unwrap();
            let (g, _, loss) = model.loss_graph(&batch, None).unwrap();
            let v = g.value(loss).data()[0];
            assert!(v.is_finite() && v > 0.0, "{decoder} loss {v}");
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let model = Model::<f32>::init(small_config("paw_cnn"), 3).unwrap();
        let sents = vec![vec![3, 4], vec![5, 6, 7, 8]];
        let z1 = model.encode(&sents).unwrap();
        let z2 = model.encode(&sents).unwrap();
        assert_eq!(z1.dims(), &[2, model.config.rep_dim()]);
        assert_eq!(z1, z2);
    }

    #[test]
    fn cast_preserves_values_exactly() {
        let model = Model::<f32>::init(small_config("paw_cnn"), 4).unwrap();
        let wide: Model<f64> = model.cast();
        assert_eq!(wide.param_count(), model.param_count());
        let mut pairs: Vec<f64> = Vec::new();
        model.visit_params(|_, t| pairs.extend(t.data().iter().map(|&v| v as f64)));
        let mut wide_vals: Vec<f64> = Vec::new();
        wide.visit_params(|_, t| wide_vals.extend(t.data()));
        assert_eq!(pairs, wide_vals);
    }
}

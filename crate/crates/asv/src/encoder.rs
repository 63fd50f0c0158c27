//! Sentence encoders: the bi-directional GRU with mean+max (or max-only)
//! pooling, and the stacked-convolution ablation encoder.
//!
//! Input projections run per time step so a sentence's hidden states are a
//! function of its own tokens only; padding a batch wider can never change
//! any representation.

use rand::Rng;

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::nn::{gru_step, pack_conv_kernel, GruCellParams, GruVars};
use crate::tape::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Pooling mode over the hidden-state matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Concatenation of temporal mean and temporal max; representation
    /// dimension 2 * d_h.
    MeanMax,
    /// Temporal max only; representation dimension d_h.
    MaxOnly,
}

/// Bi-directional GRU encoder parameters. The shared embedding lives on the
/// model; each direction has hidden size `d_h_dir`, so d_h = 2 * d_h_dir.
#[derive(Debug, Clone)]
pub struct BiGruParams<T: Element> {
    pub forward: GruCellParams<T>,
    pub backward: GruCellParams<T>,
}

impl<T: Element> BiGruParams<T> {
    pub fn init(d_h_dir: usize, d_e: usize, rng: &mut impl Rng) -> Self {
        BiGruParams {
            forward: GruCellParams::init(d_h_dir, d_e, rng),
            backward: GruCellParams::init(d_h_dir, d_e, rng),
        }
    }

    pub fn d_h_dir(&self) -> usize {
        self.forward.hidden_dim()
    }
}

/// Four same-padded width-3 convolution layers, each followed by tanh and a
/// global max pool; the representation concatenates the four pooled vectors.
#[derive(Debug, Clone)]
pub struct CnnEncoderParams<T: Element> {
    /// (kernel (3*C_in, C_out), bias (C_out)) per layer.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> CnnEncoderParams<T> {
    pub fn init(channels: &[usize], d_e: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut c_in = d_e;
        for &c_out in channels {
            layers.push((
                Tensor::uniform(&[3 * c_in, c_out], -0.1, 0.1, rng),
                Tensor::zeros(&[c_out]),
            ));
            c_in = c_out;
        }
        CnnEncoderParams { layers }
    }

    /// Constructs layers from spec-shaped (C_out, C_in, 3) kernels.
    pub fn from_kernels(kernels: &[(Tensor<T>, Tensor<T>)]) -> Self {
        CnnEncoderParams {
            layers: kernels
                .iter()
                .map(|(k, b)| (pack_conv_kernel(k), b.clone()))
                .collect(),
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.layers.iter().map(|(_, b)| b.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub enum EncoderParams<T: Element> {
    BiGru(BiGruParams<T>),
    Cnn(CnnEncoderParams<T>),
}

/// Tape-side handles for the encoder parameters.
pub enum EncoderVars {
    BiGru { forward: GruVars, backward: GruVars },
    Cnn { layers: Vec<(Var, Var)> },
}

impl<T: Element> EncoderParams<T> {
    pub fn leaf(&self, g: &mut Graph<T>) -> EncoderVars {
        match self {
            EncoderParams::BiGru(p) => EncoderVars::BiGru {
                forward: GruVars::leaf(g, &p.forward),
                backward: GruVars::leaf(g, &p.backward),
            },
            EncoderParams::Cnn(p) => EncoderVars::Cnn {
                layers: p
                    .layers
                    .iter()
                    .map(|(k, b)| (g.leaf(k.clone()), g.leaf(b.clone())))
                    .collect(),
            },
        }
    }
}

/// Hidden states of both GRU directions concatenated per position:
/// embedded input (B, T, d_e) -> (B, T, 2*d_h_dir). Positions at or beyond
/// a row's length hold garbage that pooling never reads.
pub fn bigru_states<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    lengths: &[usize],
    forward: &GruVars,
    backward: &GruVars,
) -> Var {
    let dims = g.value(x).dims().to_vec();
    let (b, t_len) = (dims[0], dims[1]);
    assert_eq!(lengths.len(), b, "one length per row");
    let d_h = g.value(forward.u_z).dims()[0];

    let run = |g: &mut Graph<T>, input: Var, cell: &GruVars| -> Var {
        let mut h = g.leaf(Tensor::zeros(&[b, d_h]));
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x_t = g.slice_time(input, t);
            h = gru_step(g, x_t, h, cell);
            states.push(h);
        }
        g.stack_time(&states)
    };

    let fwd = run(g, x, forward);
    let x_rev = g.reverse_time(x, lengths);
    let bwd_rev = run(g, x_rev, backward);
    // states of the reversed pass sit at reversed positions; flip them back
    let bwd = g.reverse_time(bwd_rev, lengths);
    g.concat_cols(fwd, bwd)
}

/// Pools hidden states (B, T, D) into sentence vectors.
pub fn pool_states<T: Element>(
    g: &mut Graph<T>,
    states: Var,
    lengths: &[usize],
    pooling: Pooling,
) -> Var {
    match pooling {
        Pooling::MeanMax => {
            let mean = g.masked_mean_pool(states, lengths);
            let max = g.masked_max_pool(states, lengths);
            g.concat_cols(mean, max)
        }
        Pooling::MaxOnly => g.masked_max_pool(states, lengths),
    }
}

/// Convolutional ablation encoder: embedded input (B, T, d_e) -> sentence
/// vectors (B, sum of channel widths). Invalid positions are zeroed before
/// every layer so padding cannot leak through the receptive field.
pub fn cnn_encode<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    lengths: &[usize],
    layers: &[(Var, Var)],
) -> Var {
    let mut cur = x;
    let mut pooled: Option<Var> = None;
    for &(kernel, bias) in layers {
        let masked = g.mask_time(cur, lengths);
        let conv = g.conv1d_same(masked, kernel, bias);
        let act = g.tanh(conv);
        let pool = g.masked_max_pool(act, lengths);
        pooled = Some(match pooled {
            None => pool,
            Some(p) => g.concat_cols(p, pool),
        });
        cur = act;
    }
    pooled.expect("cnn encoder needs at least one layer")
}

/// Embeds a batch's source ids: (B, T, d_e) plus the validity lengths.
pub fn embed_batch<T: Element>(g: &mut Graph<T>, emb: Var, batch: &Batch) -> Var {
    let (b, t_len) = (batch.size(), batch.width());
    let d_e = g.value(emb).dims()[1];
    let flat = g.gather_rows(emb, batch.source());
    g.reshape(flat, &[b, t_len, d_e])
}

/// Runs the bi-GRU over a batch and returns the hidden-state tensor
/// (B, max_len, 2*d_h_dir) together with the per-row validity lengths.
pub fn bigru_forward<T: Element>(
    batch: &Batch,
    embedding: &Tensor<T>,
    params: &BiGruParams<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    batch.check_ids(embedding.dims()[0])?;
    if params.forward.input_dim() != embedding.dims()[1] {
        return Err(Error::Shape(format!(
            "encoder expects input dim {}, embedding provides {}",
            params.forward.input_dim(),
            embedding.dims()[1]
        )));
    }
    let mut g = Graph::new();
    let emb = g.leaf(embedding.clone());
    let fwd = GruVars::leaf(&mut g, &params.forward);
    let bwd = GruVars::leaf(&mut g, &params.backward);
    let x = embed_batch(&mut g, emb, batch);
    let states = bigru_states(&mut g, x, batch.lengths(), &fwd, &bwd);
    Ok((g.value(states).clone(), batch.lengths().to_vec()))
}

/// Mean and max over the valid columns of a (d_h, M) state matrix,
/// concatenated: first d_h entries mean, last d_h entries max.
pub fn mean_max_pool<T: Element>(states: &Tensor<T>) -> Result<Tensor<T>> {
    let (mean, max) = pool_rows(states)?;
    let mut out = mean;
    out.extend(max);
    Tensor::from_vec(&[out.len()], out)
}

/// Max over the valid columns of a (d_h, M) state matrix.
pub fn max_only_pool<T: Element>(states: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, max) = pool_rows(states)?;
    Tensor::from_vec(&[max.len()], max)
}

fn pool_rows<T: Element>(states: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if states.dims().len() != 2 {
        return Err(Error::Shape(format!(
            "pooling expects (d_h, M), got {:?}",
            states.dims()
        )));
    }
    let (d, m) = (states.dims()[0], states.dims()[1]);
    if m == 0 {
        return Err(Error::EmptySentence(
            "cannot pool over zero hidden states".into(),
        ));
    }
    let inv = T::one() / T::lit(m as f64);
    let mut mean = vec![T::zero(); d];
    let mut max = vec![T::neg_infinity(); d];
    for r in 0..d {
        for c in 0..m {
            let v = states.at2(r, c);
            mean[r] += v * inv;
            if v > max[r] {
                max[r] = v;
            }
        }
    }
    Ok((mean, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrainingPair;
    use crate::nn::gru_cell;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_of(sources: &[&[usize]], width_hack: Option<&[usize]>) -> Batch {
        // width_hack appends PAD tokens by padding one dummy long source
        let mut pairs: Vec<TrainingPair> = sources
            .iter()
            .map(|s| TrainingPair {
                source: s.to_vec(),
                target: vec![3],
            })
            .collect();
        if let Some(extra) = width_hack {
            pairs.push(TrainingPair {
                source: extra.to_vec(),
                target: vec![3],
            });
        }
        let refs: Vec<&TrainingPair> = pairs.iter().collect();
        Batch::from_pairs(&refs).unwrap()
    }

    #[test]
    fn mean_max_hand_example() {
        let h = Tensor::<f64>::matrix(2, 2, &[1.0, 3.0, 2.0, 0.0]);
        let z = mean_max_pool(&h).unwrap();
        assert_eq!(z.data(), &[2.0, 1.0, 3.0, 2.0]);
        let m = max_only_pool(&h).unwrap();
        assert_eq!(m.data(), &[3.0, 2.0]);
    }

    #[test]
    fn single_column_pools_to_itself_twice() {
        let h = Tensor::<f64>::matrix(3, 1, &[0.5, -1.0, 2.0]);
        let z = mean_max_pool(&h).unwrap();
        assert_eq!(z.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let h = Tensor::<f64>::zeros(&[3, 0]);
        assert!(mean_max_pool(&h).is_err());
        assert!(max_only_pool(&h).is_err());
    }

    #[test]
    fn max_pool_is_column_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let h = Tensor::<f64>::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let mut permuted = Tensor::zeros(&[4, 5]);
        let perm = [3usize, 0, 4, 1, 2];
        for r in 0..4 {
            for (c, &pc) in perm.iter().enumerate() {
                permuted.data_mut()[r * 5 + c] = h.at2(r, pc);
            }
        }
        assert_eq!(
            max_only_pool(&h).unwrap().data(),
            max_only_pool(&permuted).unwrap().data()
        );
        // the mean half reorders its summation, so compare with a tolerance
        let z = mean_max_pool(&h).unwrap();
        let zp = mean_max_pool(&permuted).unwrap();
        for r in 0..4 {
            assert!((z.data()[r] - zp.data()[r]).abs() < 1e-12);
            assert_eq!(z.data()[4 + r], zp.data()[4 + r]);
            assert!(z.data()[4 + r] >= z.data()[r], "max >= mean per row");
        }
    }

    #[test]
    fn zero_params_give_zero_states() {
        let emb = Tensor::<f64>::zeros(&[5, 3]);
        let params = BiGruParams {
            forward: GruCellParams::zeros(2, 3),
            backward: GruCellParams::zeros(2, 3),
        };
        let batch = batch_of(&[&[3, 4, 3]], None);
        let (states, _) = bigru_forward(&batch, &emb, &params).unwrap();
        assert_eq!(states.dims(), &[1, 3, 4]);
        assert!(states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_one_matches_single_cell_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let emb = Tensor::<f64>::uniform(&[6, 3], -0.5, 0.5, &mut rng);
        let params = BiGruParams::init(2, 3, &mut rng);
        let batch = batch_of(&[&[4]], None);
        let (states, _) = bigru_forward(&batch, &emb, &params).unwrap();
        let x = Tensor::from_vec(&[3], emb.data()[4 * 3..5 * 3].to_vec()).unwrap();
        let h0 = Tensor::zeros(&[2]);
        let f = gru_cell(&x, &h0, &params.forward).unwrap();
        let b = gru_cell(&x, &h0, &params.backward).unwrap();
        for j in 0..2 {
            assert!((states.at3(0, 0, j) - f.data()[j]).abs() < 1e-12);
            assert!((states.at3(0, 0, 2 + j) - b.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_recurrence_matches_hand_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let emb = Tensor::<f64>::uniform(&[6, 1], -0.9, 0.9, &mut rng);
        let params = BiGruParams::init(1, 1, &mut rng);
        let batch = batch_of(&[&[3, 5]], None);
        let (states, _) = bigru_forward(&batch, &emb, &params).unwrap();

        let x0 = Tensor::from_vec(&[1], vec![emb.data()[3]]).unwrap();
        let x1 = Tensor::from_vec(&[1], vec![emb.data()[5]]).unwrap();
        let h0 = Tensor::zeros(&[1]);
        // forward reads x0 then x1; backward reads x1 then x0
        let f1 = gru_cell(&x0, &h0, &params.forward).unwrap();
        let f2 = gru_cell(&x1, &f1, &params.forward).unwrap();
        let b1 = gru_cell(&x1, &h0, &params.backward).unwrap();
        let b2 = gru_cell(&x0, &b1, &params.backward).unwrap();
        assert!((states.at3(0, 0, 0) - f1.data()[0]).abs() < 1e-12);
        assert!((states.at3(0, 1, 0) - f2.data()[0]).abs() < 1e-12);
        assert!((states.at3(0, 0, 1) - b2.data()[0]).abs() < 1e-12);
        assert!((states.at3(0, 1, 1) - b1.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn padding_never_changes_valid_states_or_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..25 {
            let emb = Tensor::<f32>::uniform(&[8, 4], -0.5, 0.5, &mut rng);
            let params = BiGruParams::init(3, 4, &mut rng);
            let narrow = batch_of(&[&[3, 4], &[5, 6, 7]], None);
            // same two sentences, but a longer batchmate forces PAD columns
            let wide = batch_of(&[&[3, 4], &[5, 6, 7]], Some(&[3, 3, 3, 3, 3, 3]));
            let (sn, ln) = bigru_forward(&narrow, &emb, &params).unwrap();
            let (sw, lw) = bigru_forward(&wide, &emb, &params).unwrap();
            for b in 0..2 {
                for t in 0..ln[b] {
                    for j in 0..6 {
                        assert_eq!(sn.at3(b, t, j), sw.at3(b, t, j), "state ({b},{t},{j})");
                    }
                }
            }
            // pooled representations bitwise equal over valid columns
            let mut g = Graph::new();
            let sn_v = g.leaf(sn);
            let zn = pool_states(&mut g, sn_v, &ln[..2], Pooling::MeanMax);
            let mut g2 = Graph::new();
            let sw_v = g2.leaf(sw);
            let zw = pool_states(&mut g2, sw_v, &lw, Pooling::MeanMax);
            for b in 0..2 {
                for j in 0..12 {
                    assert_eq!(g.value(zn).at2(b, j), g2.value(zw).at2(b, j));
                }
            }
        }
    }

    #[test]
    fn cnn_encoder_shapes_zeros_and_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        // 4 layers x 300 channels -> 1200-dim representation
        let p = CnnEncoderParams::<f32>::init(&[300, 300, 300, 300], 16, &mut rng);
        assert_eq!(p.rep_dim(), 1200);

        // all-zero weights -> all-zero representation
        let emb = Tensor::<f64>::uniform(&[6, 4], -0.5, 0.5, &mut rng);
        let zero = CnnEncoderParams {
            layers: vec![
                (Tensor::<f64>::zeros(&[12, 5]), Tensor::zeros(&[5])),
                (Tensor::zeros(&[15, 3]), Tensor::zeros(&[3])),
            ],
        };
        let batch = batch_of(&[&[3, 4, 5]], None);
        let mut g = Graph::new();
        let emb_v = g.leaf(emb.clone());
        let layer_vars: Vec<(Var, Var)> = zero
            .layers
            .iter()
            .map(|(k, b)| (g.leaf(k.clone()), g.leaf(b.clone())))
            .collect();
        let x = embed_batch(&mut g, emb_v, &batch);
        let z = cnn_encode(&mut g, x, batch.lengths(), &layer_vars);
        assert_eq!(g.value(z).dims(), &[1, 8]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));

        // single token: every layer's max pool is its only column
        let one = batch_of(&[&[4]], None);
        let p2 = CnnEncoderParams::<f64> {
            layers: vec![(
                Tensor::uniform(&[12, 2], -0.5, 0.5, &mut rng),
                Tensor::uniform(&[2], -0.5, 0.5, &mut rng),
            )],
        };
        let mut g = Graph::new();
        let emb_v = g.leaf(emb);
        let lv: Vec<(Var, Var)> = p2
            .layers
            .iter()
            .map(|(k, b)| (g.leaf(k.clone()), g.leaf(b.clone())))
            .collect();
        let x = embed_batch(&mut g, emb_v, &one);
        let z = cnn_encode(&mut g, x, one.lengths(), &lv);
        let masked = {
            let x2 = embed_batch(&mut g, emb_v, &one);
            let conv = g.conv1d_same(x2, lv[0].0, lv[0].1);
            g.tanh(conv)
        };
        for j in 0..2 {
            assert_eq!(g.value(z).at2(0, j), g.value(masked).at3(0, 0, j));
        }
    }
}

//! Decoders that reconstruct the target window from a sentence vector:
//! the predict-all-words CNN (the model proper), the predict-all-words RNN,
//! and autoregressive RNN/CNN ablations under three input-sampling
//! strategies. All variants produce a (B, N, d_e) feature map; word
//! prediction is a dot product against the shared embedding matrix, so the
//! loss head is variant-agnostic.

use rand::{Rng, RngCore};

use crate::corpus::{Batch, SOS};
use crate::encoder::bigru_states;
use crate::error::{Error, Result};
use crate::nn::{gru_step, GruCellParams, GruVars};
use crate::tape::{softmax_row, Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    PawCnn,
    PawRnn,
    ArRnn,
    ArCnn,
}

impl DecoderKind {
    pub fn is_autoregressive(self) -> bool {
        matches!(self, DecoderKind::ArRnn | DecoderKind::ArCnn)
    }
}

/// Input-word strategy for the autoregressive decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Ground-truth previous words.
    TeacherForcing,
    /// Draw from the multinomial predicted at the previous step.
    AlwaysSampling,
    /// Draw uniformly from the vocabulary at every step.
    UniformSampling,
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Present iff `kind` is autoregressive.
    pub sampling: Option<Sampling>,
    /// Target length N.
    pub n: usize,
    /// Per-kind widths: PawCnn [c1, c2], PawRnn [c1, h_dir],
    /// ArRnn [h], ArCnn [c1, c2].
    pub channels: Vec<usize>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("decoder target length N must be >= 1".into()));
        }
        let want = match self.kind {
            DecoderKind::PawCnn | DecoderKind::ArCnn | DecoderKind::PawRnn => 2,
            DecoderKind::ArRnn => 1,
        };
        if self.channels.len() != want {
            return Err(Error::Config(format!(
                "{:?} decoder expects {want} channel widths, got {}",
                self.kind,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        match (self.kind.is_autoregressive(), self.sampling) {
            (true, None) => Err(Error::Config(
                "autoregressive decoder requires a sampling strategy".into(),
            )),
            (false, Some(_)) => Err(Error::Config(
                "predict-all-words decoder takes no sampling strategy".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Learned decoder parameters. Projection weights are stored (out, in);
/// convolution kernels (3*C_in, C_out). The word-prediction matrix is the
/// model's shared embedding and lives outside this struct.
#[derive(Debug, Clone)]
pub enum DecoderParams<T: Element> {
    PawCnn {
        expand_w: Tensor<T>,
        expand_b: Tensor<T>,
        conv2_k: Tensor<T>,
        conv2_b: Tensor<T>,
        conv3_k: Tensor<T>,
        conv3_b: Tensor<T>,
    },
    PawRnn {
        expand_w: Tensor<T>,
        expand_b: Tensor<T>,
        forward: GruCellParams<T>,
        backward: GruCellParams<T>,
        proj_w: Tensor<T>,
        proj_b: Tensor<T>,
    },
    ArRnn {
        init_w: Tensor<T>,
        init_b: Tensor<T>,
        cell: GruCellParams<T>,
        out_w: Tensor<T>,
        out_b: Tensor<T>,
    },
    ArCnn {
        zproj_w: Tensor<T>,
        zproj_b: Tensor<T>,
        conv1_k: Tensor<T>,
        conv1_b: Tensor<T>,
        conv2_k: Tensor<T>,
        conv2_b: Tensor<T>,
        conv3_k: Tensor<T>,
        conv3_b: Tensor<T>,
    },
}

impl<T: Element> DecoderParams<T> {
    pub fn init(
        config: &DecoderConfig,
        rep_dim: usize,
        d_e: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.n;
        Ok(match config.kind {
            DecoderKind::PawCnn => {
                let (c1, c2) = (config.channels[0], config.channels[1]);
                DecoderParams::PawCnn {
                    expand_w: Tensor::uniform(&[rep_dim, n * c1], -0.1, 0.1, rng),
                    expand_b: Tensor::zeros(&[n * c1]),
                    conv2_k: Tensor::uniform(&[3 * c1, c2], -0.1, 0.1, rng),
                    conv2_b: Tensor::zeros(&[c2]),
                    conv3_k: Tensor::uniform(&[3 * c2, d_e], -0.1, 0.1, rng),
                    conv3_b: Tensor::zeros(&[d_e]),
                }
            }
            DecoderKind::PawRnn => {
                let (c1, h) = (config.channels[0], config.channels[1]);
                DecoderParams::PawRnn {
                    expand_w: Tensor::uniform(&[rep_dim, n * c1], -0.1, 0.1, rng),
                    expand_b: Tensor::zeros(&[n * c1]),
                    forward: GruCellParams::init(h, c1, rng),
                    backward: GruCellParams::init(h, c1, rng),
                    proj_w: Tensor::uniform(&[2 * h, d_e], -0.1, 0.1, rng),
                    proj_b: Tensor::zeros(&[d_e]),
                }
            }
            DecoderKind::ArRnn => {
                let h = config.channels[0];
                DecoderParams::ArRnn {
                    init_w: Tensor::uniform(&[rep_dim, h], -0.1, 0.1, rng),
                    init_b: Tensor::zeros(&[h]),
                    cell: GruCellParams::init(h, d_e, rng),
                    out_w: Tensor::uniform(&[h, d_e], -0.1, 0.1, rng),
                    out_b: Tensor::zeros(&[d_e]),
                }
            }
            DecoderKind::ArCnn => {
                let (c1, c2) = (config.channels[0], config.channels[1]);
                DecoderParams::ArCnn {
                    zproj_w: Tensor::uniform(&[rep_dim, d_e], -0.1, 0.1, rng),
                    zproj_b: Tensor::zeros(&[d_e]),
                    conv1_k: Tensor::uniform(&[3 * d_e, c1], -0.1, 0.1, rng),
                    conv1_b: Tensor::zeros(&[c1]),
                    conv2_k: Tensor::uniform(&[3 * c1, c2], -0.1, 0.1, rng),
                    conv2_b: Tensor::zeros(&[c2]),
                    conv3_k: Tensor::uniform(&[3 * c2, d_e], -0.1, 0.1, rng),
                    conv3_b: Tensor::zeros(&[d_e]),
                }
            }
        })
    }
}

/// Tape-side handles mirroring [`DecoderParams`].
pub enum DecoderVars {
    PawCnn {
        expand_w: Var,
        expand_b: Var,
        conv2_k: Var,
        conv2_b: Var,
        conv3_k: Var,
        conv3_b: Var,
    },
    PawRnn {
        expand_w: Var,
        expand_b: Var,
        forward: GruVars,
        backward: GruVars,
        proj_w: Var,
        proj_b: Var,
    },
    ArRnn {
        init_w: Var,
        init_b: Var,
        cell: GruVars,
        out_w: Var,
        out_b: Var,
    },
    ArCnn {
        zproj_w: Var,
        zproj_b: Var,
        conv1_k: Var,
        conv1_b: Var,
        conv2_k: Var,
        conv2_b: Var,
        conv3_k: Var,
        conv3_b: Var,
    },
}

impl<T: Element> DecoderParams<T> {
    pub fn leaf(&self, g: &mut Graph<T>) -> DecoderVars {
        match self {
            DecoderParams::PawCnn {
                expand_w,
                expand_b,
                conv2_k,
                conv2_b,
                conv3_k,
                conv3_b,
            } => DecoderVars::PawCnn {
                expand_w: g.leaf(expand_w.clone()),
                expand_b: g.leaf(expand_b.clone()),
                conv2_k: g.leaf(conv2_k.clone()),
                conv2_b: g.leaf(conv2_b.clone()),
                conv3_k: g.leaf(conv3_k.clone()),
                conv3_b: g.leaf(conv3_b.clone()),
            },
            DecoderParams::PawRnn {
                expand_w,
                expand_b,
                forward,
                backward,
                proj_w,
                proj_b,
            } => DecoderVars::PawRnn {
                expand_w: g.leaf(expand_w.clone()),
                expand_b: g.leaf(expand_b.clone()),
                forward: GruVars::leaf(g, forward),
                backward: GruVars::leaf(g, backward),
                proj_w: g.leaf(proj_w.clone()),
                proj_b: g.leaf(proj_b.clone()),
            },
            DecoderParams::ArRnn {
                init_w,
                init_b,
                cell,
                out_w,
                out_b,
            } => DecoderVars::ArRnn {
                init_w: g.leaf(init_w.clone()),
                init_b: g.leaf(init_b.clone()),
                cell: GruVars::leaf(g, cell),
                out_w: g.leaf(out_w.clone()),
                out_b: g.leaf(out_b.clone()),
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
            } => DecoderVars::ArCnn {
                zproj_w: g.leaf(zproj_w.clone()),
                zproj_b: g.leaf(zproj_b.clone()),
                conv1_k: g.leaf(conv1_k.clone()),
                conv1_b: g.leaf(conv1_b.clone()),
                conv2_k: g.leaf(conv2_k.clone()),
                conv2_b: g.leaf(conv2_b.clone()),
                conv3_k: g.leaf(conv3_k.clone()),
                conv3_b: g.leaf(conv3_b.clone()),
            },
        }
    }
}

fn affine<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

/// N parallel affine maps of z: (B, rep) -> (B, N, c1). Weights are stored
/// (rep, N*c1); map n occupies columns n*c1..(n+1)*c1.
pub fn linear_expand<T: Element>(g: &mut Graph<T>, z: Var, w: Var, b: Var, n: usize) -> Var {
    let batch = g.value(z).dims()[0];
    let cols = g.value(w).dims()[1];
    assert_eq!(cols % n, 0, "expand weight columns must divide by N");
    let c1 = cols / n;
    let y = affine(g, z, w, b);
    g.reshape(y, &[batch, n, c1])
}

/// Predict-all-words CNN: expand, tanh, two same-padded convolutions with a
/// tanh between, no activation after the last layer.
pub fn paw_cnn_decode<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    vars: &DecoderVars,
    n: usize,
) -> Var {
    let DecoderVars::PawCnn {
        expand_w,
        expand_b,
        conv2_k,
        conv2_b,
        conv3_k,
        conv3_b,
    } = vars
    else {
        panic!("paw_cnn_decode called with wrong parameter kind");
    };
    let f1 = linear_expand(g, z, *expand_w, *expand_b, n);
    let a1 = g.tanh(f1);
    let f2 = g.conv1d_same(a1, *conv2_k, *conv2_b);
    let a2 = g.tanh(f2);
    g.conv1d_same(a2, *conv3_k, *conv3_b)
}

/// Predict-all-words RNN: a bi-directional GRU over the expanded feature
/// map, with per-position projection to d_e.
pub fn paw_rnn_decode<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    vars: &DecoderVars,
    n: usize,
) -> Var {
    let DecoderVars::PawRnn {
        expand_w,
        expand_b,
        forward,
        backward,
        proj_w,
        proj_b,
    } = vars
    else {
        panic!("paw_rnn_decode called with wrong parameter kind");
    };
    let batch = g.value(z).dims()[0];
    let f1 = linear_expand(g, z, *expand_w, *expand_b, n);
    let lengths = vec![n; batch];
    let states = bigru_states(g, f1, &lengths, forward, backward);
    affine(g, states, *proj_w, *proj_b)
}

/// Output of an autoregressive decode: the feature map plus the input ids
/// fed at each step (step 0 is always SOS).
pub struct ArDecode {
    pub u: Var,
    pub step_inputs: Vec<Vec<usize>>,
}

/// Ids fed to step t (> 0) of an autoregressive decoder.
fn next_input_ids<T: Element>(
    g: &Graph<T>,
    emb: Var,
    u_prev: Var,
    targets_prev: &[usize],
    sampling: Sampling,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Vec<usize>> {
    match sampling {
        Sampling::TeacherForcing => Ok(targets_prev.to_vec()),
        Sampling::UniformSampling => {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("uniform sampling requires an rng".into()))?;
            let v = g.value(emb).dims()[0];
            Ok(targets_prev
                .iter()
                .map(|_| (rng.next_u64() % v as u64) as usize)
                .collect())
        }
        Sampling::AlwaysSampling => {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("always sampling requires an rng".into()))?;
            Ok(sample_multinomial_rows(g.value(emb), g.value(u_prev), rng))
        }
    }
}

/// One multinomial draw per row of `u` from softmax(E u); the cumulative
/// walk runs in f64 and picks the first index whose cumulative mass
/// exceeds the uniform draw.
pub fn sample_multinomial_rows<T: Element>(
    emb: &Tensor<T>,
    u: &Tensor<T>,
    rng: &mut dyn RngCore,
) -> Vec<usize> {
    let (v, d_e) = (emb.dims()[0], emb.dims()[1]);
    let b = u.dims()[0];
    let mut out = Vec::with_capacity(b);
    let mut logits = vec![T::zero(); v];
    let mut probs = vec![T::zero(); v];
    for bi in 0..b {
        let urow = &u.data()[bi * d_e..(bi + 1) * d_e];
        for (vi, l) in logits.iter_mut().enumerate() {
            let erow = &emb.data()[vi * d_e..(vi + 1) * d_e];
            *l = erow
                .iter()
                .zip(urow)
                .map(|(&e, &x)| e * x)
                .fold(T::zero(), |acc, t| acc + t);
        }
        softmax_row(&logits, &mut probs);
        let draw: f64 = rng.gen();
        let mut cum = 0.0f64;
        let mut pick = v - 1;
        for (vi, &p) in probs.iter().enumerate() {
            cum += p.to_f64().expect("finite prob");
            if cum > draw {
                pick = vi;
                break;
            }
        }
        out.push(pick);
    }
    out
}

/// Autoregressive GRU decoder. The initial state is an affine map of z;
/// step 0 consumes the SOS embedding, later steps the embedding chosen by
/// the sampling strategy; each state projects to d_e.
pub fn ar_rnn_decode<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    emb: Var,
    batch: &Batch,
    vars: &DecoderVars,
    sampling: Sampling,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ArDecode> {
    let DecoderVars::ArRnn {
        init_w,
        init_b,
        cell,
        out_w,
        out_b,
    } = vars
    else {
        panic!("ar_rnn_decode called with wrong parameter kind");
    };
    let b = batch.size();
    let n = batch.n();
    let mut h = affine(g, z, *init_w, *init_b);
    let mut us: Vec<Var> = Vec::with_capacity(n);
    let mut step_inputs = Vec::with_capacity(n);
    for t in 0..n {
        let ids = if t == 0 {
            vec![SOS; b]
        } else {
            next_input_ids(g, emb, us[t - 1], &batch.target_column(t - 1), sampling, &mut rng)?
        };
        let x = g.gather_rows(emb, &ids);
        step_inputs.push(ids);
        h = gru_step(g, x, h, cell);
        us.push(affine(g, h, *out_w, *out_b));
    }
    Ok(ArDecode {
        u: g.stack_time(&us),
        step_inputs,
    })
}

/// Autoregressive CNN decoder: left-padded width-3 convolutions over
/// [proj(z), emb(w_1), ..., emb(w_{N-1})], so position t sees inputs <= t.
pub fn ar_cnn_decode<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    emb: Var,
    batch: &Batch,
    vars: &DecoderVars,
    sampling: Sampling,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ArDecode> {
    let DecoderVars::ArCnn {
        zproj_w, zproj_b, ..
    } = vars
    else {
        panic!("ar_cnn_decode called with wrong parameter kind");
    };
    let n = batch.n();
    let first = affine(g, z, *zproj_w, *zproj_b);
    let mut inputs = vec![first];
    let mut step_inputs: Vec<Vec<usize>> = vec![vec![SOS; batch.size()]];
    for t in 1..n {
        let ids = match sampling {
            Sampling::AlwaysSampling => {
                // the prediction at t-1 requires convolving the prefix
                let prefix = ar_cnn_stack(g, &inputs, vars);
                let u_prev = g.slice_time(prefix, t - 1);
                next_input_ids(g, emb, u_prev, &batch.target_column(t - 1), sampling, &mut rng)?
            }
            _ => {
                // teacher forcing and uniform draws don't look at predictions
                next_input_ids(g, emb, inputs[t - 1], &batch.target_column(t - 1), sampling, &mut rng)?
            }
        };
        let x = g.gather_rows(emb, &ids);
        step_inputs.push(ids);
        inputs.push(x);
    }
    Ok(ArDecode {
        u: ar_cnn_stack(g, &inputs, vars),
        step_inputs,
    })
}

fn ar_cnn_stack<T: Element>(g: &mut Graph<T>, inputs: &[Var], vars: &DecoderVars) -> Var {
    let DecoderVars::ArCnn {
        conv1_k,
        conv1_b,
        conv2_k,
        conv2_b,
        conv3_k,
        conv3_b,
        ..
    } = vars
    else {
        panic!("ar_cnn_stack called with wrong parameter kind");
    };
    let stacked = g.stack_time(inputs);
    let c1 = g.conv1d_causal(stacked, *conv1_k, *conv1_b);
    let a1 = g.tanh(c1);
    let c2 = g.conv1d_causal(a1, *conv2_k, *conv2_b);
    let a2 = g.tanh(c2);
    g.conv1d_causal(a2, *conv3_k, *conv3_b)
}

/// Dispatches on the configured decoder kind; every variant returns a
/// (B, N, d_e) feature map.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    emb: Var,
    batch: &Batch,
    vars: &DecoderVars,
    config: &DecoderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    config.validate()?;
    if batch.n() != config.n {
        return Err(Error::Shape(format!(
            "batch target length {} != configured N {}",
            batch.n(),
            config.n
        )));
    }
    Ok(match config.kind {
        DecoderKind::PawCnn => paw_cnn_decode(g, z, vars, config.n),
        DecoderKind::PawRnn => paw_rnn_decode(g, z, vars, config.n),
        DecoderKind::ArRnn => {
            ar_rnn_decode(g, z, emb, batch, vars, config.sampling.unwrap(), rng)?.u
        }
        DecoderKind::ArCnn => {
            ar_cnn_decode(g, z, emb, batch, vars, config.sampling.unwrap(), rng)?.u
        }
    })
}

/// Per-position logits as dot products against the shared embedding:
/// (B, N, d_e) x (|V|, d_e) -> (B, N, |V|).
pub fn predict_logits<T: Element>(g: &mut Graph<T>, u: Var, emb: Var) -> Var {
    g.matmul_t(u, emb, true)
}

/// Sum of per-position negative log-likelihood, averaged over the batch.
pub fn sequence_nll<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    batch_size: usize,
) -> Result<Var> {
    let dims = g.value(logits).dims();
    if dims.len() != 3 || dims[0] != batch_size || dims[0] * dims[1] != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} targets over batch {batch_size}",
            dims,
            targets.len()
        )));
    }
    let v = dims[2];
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Index(format!("target id {bad} out of range {v}")));
    }
    Ok(g.softmax_xent_sum(logits, targets, 1.0 / batch_size as f64))
}

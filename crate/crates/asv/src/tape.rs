//! Reverse-mode differentiation over a flat operation tape.
//!
//! A [`Graph`] records every operation the model performs in one step
//! (define-by-run); [`Graph::backward`] then walks the tape in reverse and
//! accumulates exact partial derivatives into per-node gradient buffers.
//! Parameters shared across time steps or positions simply appear as inputs
//! to many nodes and sum their contributions.
//!
//! The op set is deliberately small: matrix multiply, elementwise
//! arithmetic, the two gate nonlinearities, embedding gather, width-3
//! one-dimensional convolution (same or causal padding), masked temporal
//! pooling, and a fused softmax cross-entropy head. That is everything the
//! encoder-decoder model needs; this is not a general autodiff library.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Element, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    /// op(a) @ op(b). `a` may have rank > 2 (leading axes collapse to rows,
    /// only untransposed); `b` must be 2-D.
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// a + bias, bias broadcast over all leading axes.
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// scale * a + shift, elementwise; only the scale matters in backward.
    ScaleShift {
        a: Var,
        scale: T,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    /// Rows of `table` selected by id; backward scatter-adds.
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    /// Concatenation along the last axis.
    ConcatCols {
        a: Var,
        b: Var,
    },
    /// T tensors of shape (B, D) stacked into (B, T, D).
    StackTime {
        steps: Vec<Var>,
    },
    /// Column t of a (B, T, D) tensor as (B, D).
    SliceTime {
        a: Var,
        t: usize,
    },
    /// Per-row reversal of the first `lengths[b]` time steps.
    ReverseTime {
        a: Var,
        lengths: Vec<usize>,
    },
    /// Zero out positions at or beyond each row's length.
    MaskTime {
        a: Var,
        lengths: Vec<usize>,
    },
    MaskedMeanPool {
        a: Var,
        lengths: Vec<usize>,
    },
    MaskedMaxPool {
        a: Var,
        lengths: Vec<usize>,
        argmax: Vec<usize>,
    },
    /// Width-3 1-D convolution over (B, L, C_in) with kernel (3*C_in, C_out).
    /// `causal` pads two steps on the left instead of one on each side.
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        causal: bool,
    },
    /// Same data, new dims.
    Reshape {
        a: Var,
    },
    /// Sum of all entries, scalar output.
    Sum {
        a: Var,
    },
    /// scale * sum over rows of cross-entropy(softmax(row), target).
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        scale: T,
        probs: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation tape with eagerly computed values.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Stable softmax of one logit row. Writes probabilities into `probs`,
/// accumulating the normalizer in f64, and returns (max, ln(sum)) for loss
/// computation.
pub(crate) fn softmax_row<T: Element>(logits: &[T], probs: &mut [T]) -> (T, f64) {
    let mut max = logits[0];
    for &v in &logits[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f64;
    for (p, &v) in probs.iter_mut().zip(logits) {
        let e = (v - max).exp();
        sum += e.to_f64().expect("finite exp");
        *p = e;
    }
    for p in probs.iter_mut() {
        *p = T::lit(p.to_f64().expect("finite") / sum);
    }
    (max, sum.ln())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient buffer out of the graph, avoiding a copy.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false)
    }

    /// a @ b or a @ b^T. `a` may carry extra leading axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(bv.dims().len(), 2, "matmul rhs must be 2-D");
        let m = av.rows_2d();
        let k = av.cols_2d();
        let (bk, n) = if tb {
            (bv.dims()[1], bv.dims()[0])
        } else {
            (bv.dims()[0], bv.dims()[1])
        };
        assert_eq!(k, bk, "matmul inner dim: lhs {:?} rhs {:?} tb={tb}", av.dims(), bv.dims());
        let mut out_dims: Vec<usize> = av.dims()[..av.dims().len() - 1].to_vec();
        out_dims.push(n);
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            T::one(),
            av.data(),
            (m, k),
            false,
            bv.data(),
            (bv.dims()[0], bv.dims()[1]),
            tb,
            T::zero(),
            &mut out,
        );
        let value = Tensor::from_vec(&out_dims, out).expect("matmul dims");
        self.push(value, Op::MatMul { a, b, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dims(), bv.dims(), "add shape");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(av.dims(), data).expect("add dims");
        self.push(value, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let c = av.cols_2d();
        assert_eq!(bv.dims(), [c], "bias must match last axis");
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_vec(av.dims(), data).expect("add_bias dims");
        self.push(value, Op::AddBias { a, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dims(), bv.dims(), "mul shape");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(av.dims(), data).expect("mul dims");
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (scale, shift) = (T::lit(scale), T::lit(shift));
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| scale * x + shift).collect();
        let _ = shift;
        let value = Tensor::from_vec(av.dims(), data).expect("scale dims");
        self.push(value, Op::ScaleShift { a, scale })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::from_vec(av.dims(), data).expect("sigmoid dims");
        self.push(value, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x.tanh()).collect();
        let value = Tensor::from_vec(av.dims(), data).expect("tanh dims");
        self.push(value, Op::Tanh { a })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        assert_eq!(tv.dims().len(), 2, "gather table must be 2-D");
        let (v, d) = (tv.dims()[0], tv.dims()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather id {id} out of range {v}");
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], data).expect("gather dims");
        self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            &av.dims()[..av.dims().len() - 1],
            &bv.dims()[..bv.dims().len() - 1],
            "concat leading dims"
        );
        let (ca, cb) = (av.cols_2d(), bv.cols_2d());
        let rows = av.rows_2d();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut dims: Vec<usize> = av.dims()[..av.dims().len() - 1].to_vec();
        dims.push(ca + cb);
        let value = Tensor::from_vec(&dims, data).expect("concat dims");
        self.push(value, Op::ConcatCols { a, b })
    }

    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "stack_time needs at least one step");
        let dims0 = self.nodes[steps[0].0].value.dims().to_vec();
        assert_eq!(dims0.len(), 2, "stack_time steps must be (B, D)");
        let (b, d) = (dims0[0], dims0[1]);
        let t_len = steps.len();
        let mut data = vec![T::zero(); b * t_len * d];
        for (t, &s) in steps.iter().enumerate() {
            let sv = &self.nodes[s.0].value;
            assert_eq!(sv.dims(), dims0.as_slice(), "stack_time step shape");
            for bi in 0..b {
                let dst = (bi * t_len + t) * d;
                data[dst..dst + d].copy_from_slice(&sv.data()[bi * d..(bi + 1) * d]);
            }
        }
        let value = Tensor::from_vec(&[b, t_len, d], data).expect("stack dims");
        self.push(
            value,
            Op::StackTime {
                steps: steps.to_vec(),
            },
        )
    }

    pub fn slice_time(&mut self, a: Var, t: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.dims().len(), 3, "slice_time input must be (B, T, D)");
        let (b, t_len, d) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        assert!(t < t_len, "slice_time index");
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let src = (bi * t_len + t) * d;
            data.extend_from_slice(&av.data()[src..src + d]);
        }
        let value = Tensor::from_vec(&[b, d], data).expect("slice dims");
        self.push(value, Op::SliceTime { a, t })
    }

    pub fn reverse_time(&mut self, a: Var, lengths: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.dims().len(), 3, "reverse_time input must be (B, T, D)");
        let (b, t_len, d) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        assert_eq!(lengths.len(), b, "reverse_time lengths");
        let mut data = av.data().to_vec();
        for (bi, &len) in lengths.iter().enumerate() {
            assert!(len <= t_len, "length exceeds time axis");
            for t in 0..len {
                let src = (bi * t_len + (len - 1 - t)) * d;
                let dst = (bi * t_len + t) * d;
                data[dst..dst + d].copy_from_slice(&av.data()[src..src + d]);
            }
        }
        let value = Tensor::from_vec(av.dims(), data).expect("reverse dims");
        self.push(
            value,
            Op::ReverseTime {
                a,
                lengths: lengths.to_vec(),
            },
        )
    }

    pub fn mask_time(&mut self, a: Var, lengths: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.dims().len(), 3, "mask_time input must be (B, T, D)");
        let (b, t_len, d) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        assert_eq!(lengths.len(), b, "mask_time lengths");
        let mut data = av.data().to_vec();
        for (bi, &len) in lengths.iter().enumerate() {
            for t in len..t_len {
                let dst = (bi * t_len + t) * d;
                data[dst..dst + d].iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let value = Tensor::from_vec(av.dims(), data).expect("mask dims");
        self.push(
            value,
            Op::MaskTime {
                a,
                lengths: lengths.to_vec(),
            },
        )
    }

    pub fn masked_mean_pool(&mut self, a: Var, lengths: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.dims().len(), 3, "pool input must be (B, T, D)");
        let (b, t_len, d) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        assert_eq!(lengths.len(), b, "pool lengths");
        let mut data = vec![T::zero(); b * d];
        for (bi, &len) in lengths.iter().enumerate() {
            assert!(len >= 1 && len <= t_len, "pool length {len} of {t_len}");
            let inv = T::one() / T::lit(len as f64);
            for t in 0..len {
                let src = (bi * t_len + t) * d;
                for j in 0..d {
                    data[bi * d + j] += av.data()[src + j] * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[b, d], data).expect("mean pool dims");
        self.push(
            value,
            Op::MaskedMeanPool {
                a,
                lengths: lengths.to_vec(),
            },
        )
    }

    pub fn masked_max_pool(&mut self, a: Var, lengths: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.dims().len(), 3, "pool input must be (B, T, D)");
        let (b, t_len, d) = (av.dims()[0], av.dims()[1], av.dims()[2]);
        assert_eq!(lengths.len(), b, "pool lengths");
        let mut data = vec![T::zero(); b * d];
        let mut argmax = vec![0usize; b * d];
        for (bi, &len) in lengths.iter().enumerate() {
            assert!(len >= 1 && len <= t_len, "pool length {len} of {t_len}");
            for j in 0..d {
                let mut best = av.data()[(bi * t_len) * d + j];
                let mut best_t = 0usize;
                for t in 1..len {
                    let v = av.data()[(bi * t_len + t) * d + j];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                data[bi * d + j] = best;
                argmax[bi * d + j] = best_t;
            }
        }
        let value = Tensor::from_vec(&[b, d], data).expect("max pool dims");
        self.push(
            value,
            Op::MaskedMaxPool {
                a,
                lengths: lengths.to_vec(),
                argmax,
            },
        )
    }

    pub fn conv1d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        self.conv1d(input, kernel, bias, false)
    }

    pub fn conv1d_causal(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        self.conv1d(input, kernel, bias, true)
    }

    fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, causal: bool) -> Var {
        let iv = &self.nodes[input.0].value;
        let kv = &self.nodes[kernel.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(iv.dims().len(), 3, "conv input must be (B, L, C_in)");
        let (b, l, c_in) = (iv.dims()[0], iv.dims()[1], iv.dims()[2]);
        assert_eq!(kv.dims().len(), 2, "conv kernel must be (3*C_in, C_out)");
        assert_eq!(kv.dims()[0], 3 * c_in, "conv kernel rows");
        let c_out = kv.dims()[1];
        assert_eq!(bv.dims(), [c_out], "conv bias");
        let cols = im2col(iv.data(), b, l, c_in, causal);
        let mut out = vec![T::zero(); b * l * c_out];
        gemm_into(
            T::one(),
            &cols,
            (b * l, 3 * c_in),
            false,
            kv.data(),
            (3 * c_in, c_out),
            false,
            T::zero(),
            &mut out,
        );
        for row in out.chunks_exact_mut(c_out) {
            for (x, &bb) in row.iter_mut().zip(bv.data()) {
                *x += bb;
            }
        }
        let value = Tensor::from_vec(&[b, l, c_out], out).expect("conv dims");
        self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                causal,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor::from_vec(dims, av.data().to_vec()).expect("reshape size");
        self.push(value, Op::Reshape { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let total: T = av.data().iter().copied().sum();
        let value = Tensor::from_vec(&[1], vec![total]).expect("sum dims");
        self.push(value, Op::Sum { a })
    }

    /// scale * sum over rows of -log softmax(row)[target]. Rows are the
    /// collapsed leading axes of `logits`; the last axis indexes the
    /// vocabulary.
    pub fn softmax_xent_sum(&mut self, logits: Var, targets: &[usize], scale: f64) -> Var {
        let lv = &self.nodes[logits.0].value;
        let v = lv.cols_2d();
        let rows = lv.rows_2d();
        assert_eq!(targets.len(), rows, "one target per logit row");
        assert!(v >= 2, "need at least two classes");
        let scale = T::lit(scale);
        let mut probs = vec![T::zero(); rows * v];
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v, "target id {t} out of range {v}");
            let row = &lv.data()[r * v..(r + 1) * v];
            let (max, ln_sum) = softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            loss += ln_sum - (row[t] - max).to_f64().expect("finite logit");
        }
        let total = scale * T::lit(loss);
        let value = Tensor::from_vec(&[1], vec![total]).expect("xent dims");
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
        )
    }

    /// Probabilities cached by a `softmax_xent_sum` node, one row per target.
    pub fn xent_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxXent { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Populates gradients of `root` with respect to every reachable node.
    /// `root` must be a scalar (single-entry) node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.dims()
            )));
        }
        self.validate_topology()?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g_out, &mut grads);
            grads[idx] = Some(g_out);
        }
        self.grads = grads;
        Ok(())
    }

    /// Ops may only reference earlier nodes; violations mean the record is
    /// corrupt (a cycle or forward reference).
    fn validate_topology(&self) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            let ok = node.op_inputs().iter().all(|v| v.0 < idx);
            if !ok {
                return Err(Error::Internal(format!(
                    "computation record node {idx} references a later node"
                )));
            }
        }
        Ok(())
    }

    fn accumulate(&self, idx: usize, g_out: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let m = av.rows_2d();
                let k = av.cols_2d();
                let n = node.value.cols_2d();
                let bdims = (bv.dims()[0], bv.dims()[1]);
                // dA += dC @ op(B)^T
                let ga = grad_buf(grads, a.0, av.len());
                gemm_into(T::one(), g_out, (m, n), false, bv.data(), bdims, !tb, T::one(), ga);
                // dB += A^T @ dC (or dC^T @ A when B was transposed)
                let gb = grad_buf(grads, b.0, bv.len());
                if *tb {
                    gemm_into(T::one(), g_out, (m, n), true, av.data(), (m, k), false, T::one(), gb);
                } else {
                    gemm_into(T::one(), av.data(), (m, k), true, g_out, (m, n), false, T::one(), gb);
                }
            }
            Op::Add { a, b } => {
                add_assign(grad_buf(grads, a.0, g_out.len()), g_out);
                add_assign(grad_buf(grads, b.0, g_out.len()), g_out);
            }
            Op::AddBias { a, bias } => {
                let c = self.nodes[bias.0].value.len();
                add_assign(grad_buf(grads, a.0, g_out.len()), g_out);
                let gb = grad_buf(grads, bias.0, c);
                for row in g_out.chunks_exact(c) {
                    add_assign(gb, row);
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let ga = grad_buf(grads, a.0, av.len());
                for ((g, &go), &y) in ga.iter_mut().zip(g_out).zip(bv) {
                    *g += go * y;
                }
                let gb = grad_buf(grads, b.0, bv.len());
                for ((g, &go), &x) in gb.iter_mut().zip(g_out).zip(av) {
                    *g += go * x;
                }
            }
            Op::ScaleShift { a, scale } => {
                let ga = grad_buf(grads, a.0, g_out.len());
                for (g, &go) in ga.iter_mut().zip(g_out) {
                    *g += *scale * go;
                }
            }
            Op::Sigmoid { a } => {
                let s = node.value.data();
                let ga = grad_buf(grads, a.0, g_out.len());
                for ((g, &go), &sv) in ga.iter_mut().zip(g_out).zip(s) {
                    *g += go * sv * (T::one() - sv);
                }
            }
            Op::Tanh { a } => {
                let t = node.value.data();
                let ga = grad_buf(grads, a.0, g_out.len());
                for ((g, &go), &tv) in ga.iter_mut().zip(g_out).zip(t) {
                    *g += go * (T::one() - tv * tv);
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[table.0].value.cols_2d();
                let gt = grad_buf(grads, table.0, self.nodes[table.0].value.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut gt[id * d..(id + 1) * d], &g_out[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatCols { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (ca, cb) = (av.cols_2d(), bv.cols_2d());
                let rows = av.rows_2d();
                let ga = grad_buf(grads, a.0, av.len());
                for r in 0..rows {
                    add_assign(
                        &mut ga[r * ca..(r + 1) * ca],
                        &g_out[r * (ca + cb)..r * (ca + cb) + ca],
                    );
                }
                let gb = grad_buf(grads, b.0, bv.len());
                for r in 0..rows {
                    add_assign(
                        &mut gb[r * cb..(r + 1) * cb],
                        &g_out[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                    );
                }
            }
            Op::StackTime { steps } => {
                let dims = node.value.dims();
                let (b, t_len, d) = (dims[0], dims[1], dims[2]);
                for (t, s) in steps.iter().enumerate() {
                    let gs = grad_buf(grads, s.0, b * d);
                    for bi in 0..b {
                        let src = (bi * t_len + t) * d;
                        add_assign(&mut gs[bi * d..(bi + 1) * d], &g_out[src..src + d]);
                    }
                }
            }
            Op::SliceTime { a, t } => {
                let dims = self.nodes[a.0].value.dims();
                let (b, t_len, d) = (dims[0], dims[1], dims[2]);
                let ga = grad_buf(grads, a.0, b * t_len * d);
                for bi in 0..b {
                    let dst = (bi * t_len + t) * d;
                    add_assign(&mut ga[dst..dst + d], &g_out[bi * d..(bi + 1) * d]);
                }
            }
            Op::ReverseTime { a, lengths } => {
                let dims = self.nodes[a.0].value.dims();
                let (_, t_len, d) = (dims[0], dims[1], dims[2]);
                let ga = grad_buf(grads, a.0, self.nodes[a.0].value.len());
                for (bi, &len) in lengths.iter().enumerate() {
                    for t in 0..t_len {
                        let src_t = if t < len { len - 1 - t } else { t };
                        let dst = (bi * t_len + src_t) * d;
                        let src = (bi * t_len + t) * d;
                        add_assign(&mut ga[dst..dst + d], &g_out[src..src + d]);
                    }
                }
            }
            Op::MaskTime { a, lengths } => {
                let dims = self.nodes[a.0].value.dims();
                let (_, t_len, d) = (dims[0], dims[1], dims[2]);
                let ga = grad_buf(grads, a.0, self.nodes[a.0].value.len());
                for (bi, &len) in lengths.iter().enumerate() {
                    for t in 0..len {
                        let off = (bi * t_len + t) * d;
                        add_assign(&mut ga[off..off + d], &g_out[off..off + d]);
                    }
                }
            }
            Op::MaskedMeanPool { a, lengths } => {
                let dims = self.nodes[a.0].value.dims();
                let (_, t_len, d) = (dims[0], dims[1], dims[2]);
                let ga = grad_buf(grads, a.0, self.nodes[a.0].value.len());
                for (bi, &len) in lengths.iter().enumerate() {
                    let inv = T::one() / T::lit(len as f64);
                    for t in 0..len {
                        let off = (bi * t_len + t) * d;
                        for j in 0..d {
                            ga[off + j] += g_out[bi * d + j] * inv;
                        }
                    }
                }
            }
            Op::MaskedMaxPool {
                a,
                lengths,
                argmax,
            } => {
                let dims = self.nodes[a.0].value.dims();
                let (_, t_len, d) = (dims[0], dims[1], dims[2]);
                let ga = grad_buf(grads, a.0, self.nodes[a.0].value.len());
                for (bi, _) in lengths.iter().enumerate() {
                    for j in 0..d {
                        let t = argmax[bi * d + j];
                        ga[(bi * t_len + t) * d + j] += g_out[bi * d + j];
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                causal,
            } => {
                let iv = &self.nodes[input.0].value;
                let kv = &self.nodes[kernel.0].value;
                let (b, l, c_in) = (iv.dims()[0], iv.dims()[1], iv.dims()[2]);
                let c_out = kv.dims()[1];
                // dBias: column sums of dOut rows.
                let gb = grad_buf(grads, bias.0, c_out);
                for row in g_out.chunks_exact(c_out) {
                    add_assign(gb, row);
                }
                // dKernel += im2col(input)^T @ dOut.
                let cols = im2col(iv.data(), b, l, c_in, *causal);
                let gk = grad_buf(grads, kernel.0, kv.len());
                gemm_into(
                    T::one(),
                    &cols,
                    (b * l, 3 * c_in),
                    true,
                    g_out,
                    (b * l, c_out),
                    false,
                    T::one(),
                    gk,
                );
                // dInput: cols of dOut @ kernel^T scattered back.
                let mut dcols = vec![T::zero(); b * l * 3 * c_in];
                gemm_into(
                    T::one(),
                    g_out,
                    (b * l, c_out),
                    false,
                    kv.data(),
                    (3 * c_in, c_out),
                    true,
                    T::zero(),
                    &mut dcols,
                );
                let gi = grad_buf(grads, input.0, iv.len());
                col2im_acc(&dcols, gi, b, l, c_in, *causal);
            }
            Op::Reshape { a } => {
                add_assign(grad_buf(grads, a.0, g_out.len()), g_out);
            }
            Op::Sum { a } => {
                let go = g_out[0];
                let ga = grad_buf(grads, a.0, self.nodes[a.0].value.len());
                for g in ga.iter_mut() {
                    *g += go;
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                scale,
                probs,
            } => {
                let v = self.nodes[logits.0].value.cols_2d();
                let go = g_out[0] * *scale;
                let gl = grad_buf(grads, logits.0, self.nodes[logits.0].value.len());
                for (r, &t) in targets.iter().enumerate() {
                    let p = &probs[r * v..(r + 1) * v];
                    let g = &mut gl[r * v..(r + 1) * v];
                    for (gi, &pi) in g.iter_mut().zip(p) {
                        *gi += go * pi;
                    }
                    g[t] -= go;
                }
            }
        }
    }
}

impl<T: Element> Node<T> {
    fn op_inputs(&self) -> Vec<Var> {
        match &self.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatCols { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::ScaleShift { a, .. }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::SliceTime { a, .. }
            | Op::ReverseTime { a, .. }
            | Op::MaskTime { a, .. }
            | Op::MaskedMeanPool { a, .. }
            | Op::MaskedMaxPool { a, .. }
            | Op::Reshape { a }
            | Op::Sum { a } => vec![*a],
            Op::GatherRows { table, .. } => vec![*table],
            Op::StackTime { steps } => steps.clone(),
            Op::Conv1d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

fn grad_buf<T: Element>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut [T] {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_assign<T: Element>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// (B*L, 3*C) window matrix for a width-3 convolution; out-of-range
/// positions are zero. Same padding reads offsets -1..=1, causal -2..=0.
fn im2col<T: Element>(input: &[T], b: usize, l: usize, c: usize, causal: bool) -> Vec<T> {
    let offsets: [isize; 3] = if causal { [-2, -1, 0] } else { [-1, 0, 1] };
    let mut cols = vec![T::zero(); b * l * 3 * c];
    for bi in 0..b {
        for li in 0..l {
            let row = (bi * l + li) * 3 * c;
            for (k, &off) in offsets.iter().enumerate() {
                let src_l = li as isize + off;
                if src_l >= 0 && (src_l as usize) < l {
                    let src = (bi * l + src_l as usize) * c;
                    cols[row + k * c..row + (k + 1) * c]
                        .copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Transpose of `im2col` as a scatter-add; used for input gradients.
fn col2im_acc<T: Element>(dcols: &[T], dinput: &mut [T], b: usize, l: usize, c: usize, causal: bool) {
    let offsets: [isize; 3] = if causal { [-2, -1, 0] } else { [-1, 0, 1] };
    for bi in 0..b {
        for li in 0..l {
            let row = (bi * l + li) * 3 * c;
            for (k, &off) in offsets.iter().enumerate() {
                let src_l = li as isize + off;
                if src_l >= 0 && (src_l as usize) < l {
                    let dst = (bi * l + src_l as usize) * c;
                    add_assign(
                        &mut dinput[dst..dst + c],
                        &dcols[row + k * c..row + (k + 1) * c],
                    );
                }
            }
        }
    }
}

//! Learned-layer primitives: GRU cell, same-padded width-3 convolution and
//! the tied softmax cross-entropy head.
//!
//! Each primitive exists twice on purpose: a plain direct-loop version
//! operating on bare tensors (the reference the unit tests pin down), and a
//! tape builder used by the model so gradients come from [`crate::tape`].
//! Tests assert the two routes agree.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{softmax_row, Graph, Var};
use crate::tensor::{Element, Tensor};

/// Parameters of one GRU direction.
///
/// Weight matrices are stored transposed for row-major batched
/// multiplication: input-to-hidden as (d_in, d_h), hidden-to-hidden as
/// (d_h, d_h) applied on the right, biases (d_h). The update rule is
///
/// ```text
/// z = sigmoid(W_z x + U_z h + b_z)
/// r = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r .* h) + b_h)
/// h' = (1 - z) .* h + z .* h~
/// ```
#[derive(Debug, Clone)]
pub struct GruCellParams<T: Element> {
    pub w_z: Tensor<T>,
    pub u_z: Tensor<T>,
    pub b_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Element> GruCellParams<T> {
    pub fn zeros(d_h: usize, d_in: usize) -> Self {
        GruCellParams {
            w_z: Tensor::zeros(&[d_in, d_h]),
            u_z: Tensor::zeros(&[d_h, d_h]),
            b_z: Tensor::zeros(&[d_h]),
            w_r: Tensor::zeros(&[d_in, d_h]),
            u_r: Tensor::zeros(&[d_h, d_h]),
            b_r: Tensor::zeros(&[d_h]),
            w_h: Tensor::zeros(&[d_in, d_h]),
            u_h: Tensor::zeros(&[d_h, d_h]),
            b_h: Tensor::zeros(&[d_h]),
        }
    }

    /// Weights uniform in (-0.1, 0.1), biases zero.
    pub fn init(d_h: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        GruCellParams {
            w_z: Tensor::uniform(&[d_in, d_h], -0.1, 0.1, rng),
            u_z: Tensor::uniform(&[d_h, d_h], -0.1, 0.1, rng),
            b_z: Tensor::zeros(&[d_h]),
            w_r: Tensor::uniform(&[d_in, d_h], -0.1, 0.1, rng),
            u_r: Tensor::uniform(&[d_h, d_h], -0.1, 0.1, rng),
            b_r: Tensor::zeros(&[d_h]),
            w_h: Tensor::uniform(&[d_in, d_h], -0.1, 0.1, rng),
            u_h: Tensor::uniform(&[d_h, d_h], -0.1, 0.1, rng),
            b_h: Tensor::zeros(&[d_h]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.dims()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.dims()[0]
    }

    fn validate(&self) -> Result<()> {
        let (d_h, d_in) = (self.hidden_dim(), self.input_dim());
        let pairs: [(&Tensor<T>, &[usize], &str); 9] = [
            (&self.w_z, &[d_in, d_h], "w_z"),
            (&self.u_z, &[d_h, d_h], "u_z"),
            (&self.b_z, &[d_h], "b_z"),
            (&self.w_r, &[d_in, d_h], "w_r"),
            (&self.u_r, &[d_h, d_h], "u_r"),
            (&self.b_r, &[d_h], "b_r"),
            (&self.w_h, &[d_in, d_h], "w_h"),
            (&self.u_h, &[d_h, d_h], "u_h"),
            (&self.b_h, &[d_h], "b_h"),
        ];
        for (t, dims, name) in pairs {
            if t.dims() != dims {
                return Err(Error::Shape(format!(
                    "gru {name}: expected {:?}, got {:?}",
                    dims,
                    t.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&'static str, &'a Tensor<T>)) {
        f("w_z", &self.w_z);
        f("u_z", &self.u_z);
        f("b_z", &self.b_z);
        f("w_r", &self.w_r);
        f("u_r", &self.u_r);
        f("b_r", &self.b_r);
        f("w_h", &self.w_h);
        f("u_h", &self.u_h);
        f("b_h", &self.b_h);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor<T>)) {
        f("w_z", &mut self.w_z);
        f("u_z", &mut self.u_z);
        f("b_z", &mut self.b_z);
        f("w_r", &mut self.w_r);
        f("u_r", &mut self.u_r);
        f("b_r", &mut self.b_r);
        f("w_h", &mut self.w_h);
        f("u_h", &mut self.u_h);
        f("b_h", &mut self.b_h);
    }
}

/// One GRU step on plain vectors; the reference implementation.
pub fn gru_cell<T: Element>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    p: &GruCellParams<T>,
) -> Result<Tensor<T>> {
    p.validate()?;
    let (d_h, d_in) = (p.hidden_dim(), p.input_dim());
    if x.dims() != [d_in] {
        return Err(Error::Shape(format!(
            "gru input: expected [{d_in}], got {:?}",
            x.dims()
        )));
    }
    if h_prev.dims() != [d_h] {
        return Err(Error::Shape(format!(
            "gru state: expected [{d_h}], got {:?}",
            h_prev.dims()
        )));
    }
    // weights are stored (in, out): output j sums w[i, j] * v[i]
    let matvec = |w: &Tensor<T>, v: &[T]| -> Vec<T> {
        let (rows, cols) = (w.dims()[0], w.dims()[1]);
        debug_assert_eq!(rows, v.len());
        (0..cols)
            .map(|j| {
                (0..rows)
                    .map(|i| w.data()[i * cols + j] * v[i])
                    .fold(T::zero(), |acc, t| acc + t)
            })
            .collect()
    };
    let sigm = |v: T| T::one() / (T::one() + (-v).exp());
    let wzx = matvec(&p.w_z, x.data());
    let uzh = matvec(&p.u_z, h_prev.data());
    let wrx = matvec(&p.w_r, x.data());
    let urh = matvec(&p.u_r, h_prev.data());
    let mut out = vec![T::zero(); d_h];
    let mut rh = vec![T::zero(); d_h];
    let mut z = vec![T::zero(); d_h];
    for i in 0..d_h {
        z[i] = sigm(wzx[i] + uzh[i] + p.b_z.data()[i]);
        let r = sigm(wrx[i] + urh[i] + p.b_r.data()[i]);
        rh[i] = r * h_prev.data()[i];
    }
    let whx = matvec(&p.w_h, x.data());
    let uhr = matvec(&p.u_h, &rh);
    for i in 0..d_h {
        let cand = (whx[i] + uhr[i] + p.b_h.data()[i]).tanh();
        out[i] = (T::one() - z[i]) * h_prev.data()[i] + z[i] * cand;
    }
    let t = Tensor::from_vec(&[d_h], out)?;
    t.check_finite("gru_cell output")?;
    Ok(t)
}

/// Tape handles for one GRU direction.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn leaf<T: Element>(g: &mut Graph<T>, p: &GruCellParams<T>) -> Self {
        GruVars {
            w_z: g.leaf(p.w_z.clone()),
            u_z: g.leaf(p.u_z.clone()),
            b_z: g.leaf(p.b_z.clone()),
            w_r: g.leaf(p.w_r.clone()),
            u_r: g.leaf(p.u_r.clone()),
            b_r: g.leaf(p.b_r.clone()),
            w_h: g.leaf(p.w_h.clone()),
            u_h: g.leaf(p.u_h.clone()),
            b_h: g.leaf(p.b_h.clone()),
        }
    }

    pub fn vars(&self) -> [Var; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

/// Batched GRU step on the tape: x (B, d_in), h (B, d_h) -> (B, d_h).
pub fn gru_step<T: Element>(g: &mut Graph<T>, x: Var, h: Var, p: &GruVars) -> Var {
    let xz = g.matmul(x, p.w_z);
    let xr = g.matmul(x, p.w_r);
    let xh = g.matmul(x, p.w_h);
    gru_step_precomputed(g, xz, xr, xh, h, p)
}

/// GRU step where the input projections x W_z^T, x W_r^T, x W_h^T were
/// already computed (batched over time by the callers that can).
pub fn gru_step_precomputed<T: Element>(
    g: &mut Graph<T>,
    xz: Var,
    xr: Var,
    xh: Var,
    h: Var,
    p: &GruVars,
) -> Var {
    let hz = g.matmul(h, p.u_z);
    let zsum = g.add(xz, hz);
    let zb = g.add_bias(zsum, p.b_z);
    let z = g.sigmoid(zb);

    let hr = g.matmul(h, p.u_r);
    let rsum = g.add(xr, hr);
    let rb = g.add_bias(rsum, p.b_r);
    let r = g.sigmoid(rb);

    let rh = g.mul(r, h);
    let hh = g.matmul(rh, p.u_h);
    let csum = g.add(xh, hh);
    let cb = g.add_bias(csum, p.b_h);
    let cand = g.tanh(cb);

    let keep = g.scale_shift(z, -1.0, 1.0);
    let old = g.mul(keep, h);
    let new = g.mul(z, cand);
    g.add(old, new)
}

/// Same-padded width-3 convolution on a single (C_in, L) feature map;
/// kernel (C_out, C_in, 3), bias (C_out). Reference implementation.
///
/// Kernel tap k multiplies the input at offset k - 1, so tap 0 reads the
/// position to the left.
pub fn conv1d_same<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input.dims().len() != 2 {
        return Err(Error::Shape(format!(
            "conv input must be (C_in, L), got {:?}",
            input.dims()
        )));
    }
    if kernel.dims().len() != 3 || kernel.dims()[2] != 3 {
        return Err(Error::Shape(format!(
            "conv kernel must be (C_out, C_in, 3), got {:?}",
            kernel.dims()
        )));
    }
    let (c_in, l) = (input.dims()[0], input.dims()[1]);
    let (c_out, k_in) = (kernel.dims()[0], kernel.dims()[1]);
    if k_in != c_in {
        return Err(Error::Shape(format!(
            "conv channels: input {c_in}, kernel expects {k_in}"
        )));
    }
    if bias.dims() != [c_out] {
        return Err(Error::Shape(format!(
            "conv bias: expected [{c_out}], got {:?}",
            bias.dims()
        )));
    }
    if l == 0 {
        return Err(Error::Shape("conv input length must be >= 1".into()));
    }
    let mut out = vec![T::zero(); c_out * l];
    for co in 0..c_out {
        for i in 0..l {
            let mut acc = bias.data()[co];
            for ci in 0..c_in {
                for (k, off) in (-1isize..=1).enumerate() {
                    let src = i as isize + off;
                    if src >= 0 && (src as usize) < l {
                        acc += kernel.data()[(co * c_in + ci) * 3 + k]
                            * input.data()[ci * l + src as usize];
                    }
                }
            }
            out[co * l + i] = acc;
        }
    }
    let t = Tensor::from_vec(&[c_out, l], out)?;
    t.check_finite("conv1d_same output")?;
    Ok(t)
}

/// Repacks a (C_out, C_in, 3) kernel into the (3*C_in, C_out) layout the
/// tape convolution consumes.
pub fn pack_conv_kernel<T: Element>(kernel: &Tensor<T>) -> Tensor<T> {
    let (c_out, c_in) = (kernel.dims()[0], kernel.dims()[1]);
    let mut data = vec![T::zero(); 3 * c_in * c_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            for k in 0..3 {
                data[(k * c_in + ci) * c_out + co] = kernel.data()[(co * c_in + ci) * 3 + k];
            }
        }
    }
    Tensor::from_vec(&[3 * c_in, c_out], data).expect("packed kernel dims")
}

/// Softmax with max-subtraction plus negative log-likelihood of `target`.
/// Returns (loss, probabilities).
pub fn softmax_xent<T: Element>(logits: &Tensor<T>, target: usize) -> Result<(T, Tensor<T>)> {
    if logits.dims().len() != 1 || logits.len() < 2 {
        return Err(Error::Shape(format!(
            "logits must be a vector of at least 2 entries, got {:?}",
            logits.dims()
        )));
    }
    if target >= logits.len() {
        return Err(Error::Index(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let (max, ln_sum) = softmax_row(logits.data(), &mut probs);
    let loss = T::lit(ln_sum) - (logits.data()[target] - max);
    let p = Tensor::from_vec(&[logits.len()], probs)?;
    p.check_finite("softmax probabilities")?;
    Ok((loss, p))
}

//! Dense row-major tensors with an optional gradient buffer.
//!
//! Training arithmetic runs in `f32`; the gradient-check harness runs the
//! identical graph in `f64`. Everything numeric is therefore generic over
//! [`Element`], which wires in the right `matrixmultiply` gemm kernel.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type usable inside tensors: `f32` or `f64`.
pub trait Element:
    Float + NumAssignOps + FromPrimitive + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// c = alpha * op(a) @ op(b) + beta * c, dense with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover m*k, k*n and m*n elements under the given
    /// strides, as in `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Shorthand for converting an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
}

impl Element for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major multi-dimensional array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element> {
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if want != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} entries, got {}",
                dims,
                want,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    /// 1-D tensor from a slice of `f64` literals; test convenience.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            dims: vec![values.len()],
            data: values.iter().map(|&v| T::lit(v)).collect(),
            grad: None,
        }
    }

    /// Row-major 2-D tensor from `f64` literals.
    pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix literal size");
        Tensor {
            dims: vec![rows, cols],
            data: values.iter().map(|&v| T::lit(v)).collect(),
            grad: None,
        }
    }

    /// Entries drawn uniformly from `(lo, hi)`, in index order.
    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Installs (or clears to zero) a gradient buffer of matching shape.
    pub fn zero_grad(&mut self) {
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Runs `f` over (data, grad) with both borrowed at once; errors if no
    /// gradient buffer is attached.
    pub fn apply_grad<R>(&mut self, f: impl FnOnce(&mut [T], &[T]) -> Result<R>) -> Result<R> {
        let Tensor { data, grad, .. } = self;
        let grad = grad
            .as_deref()
            .ok_or_else(|| Error::Numeric("no gradient attached".into()))?;
        f(data, grad)
    }

    /// Number of rows when the tensor is viewed as a 2-D matrix collapsing
    /// all leading axes; the last axis is the column count.
    pub fn rows_2d(&self) -> usize {
        assert!(!self.dims.is_empty(), "rows_2d on scalar-less tensor");
        self.dims[..self.dims.len() - 1].iter().product()
    }

    pub fn cols_2d(&self) -> usize {
        *self.dims.last().expect("cols_2d on empty dims")
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let want: usize = dims.iter().product();
        if want != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} entries to {:?}",
                self.data.len(),
                dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every entry (and every gradient entry, if present) is finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Numeric(format!("non-finite value in {what}")));
        }
        if let Some(g) = &self.grad {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {what}")));
            }
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x *= v);
    }

    /// Converts element type; exact when widening f32 -> f64.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::lit(v.to_f64().expect("finite cast")))
                .collect(),
            grad: None,
        }
    }
}

/// out = op(a) @ op(b) for row-major 2-D views.
///
/// `a_dims`/`b_dims` are the stored shapes; `ta`/`tb` transpose the operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Element>(
    alpha: T,
    a: &[T],
    a_dims: (usize, usize),
    ta: bool,
    b: &[T],
    b_dims: (usize, usize),
    tb: bool,
    beta: T,
    out: &mut [T],
) -> (usize, usize) {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let (kb, n) = if tb { (b_dims.1, b_dims.0) } else { b_dims };
    assert_eq!(k, kb, "gemm inner dims: {a_dims:?}^{ta} @ {b_dims:?}^{tb}");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.len(), a_dims.0 * a_dims.1, "gemm lhs size");
    assert_eq!(b.len(), b_dims.0 * b_dims.1, "gemm rhs size");
    let (rsa, csa) = if ta {
        (1, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1)
    };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_slot_matches_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.zero_grad();
        assert_eq!(t.grad().unwrap().len(), 4);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
    }

    #[test]
    fn gemm_plain_and_transposed() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        gemm_into(1.0, &a, (2, 2), false, &b, (2, 2), false, 0.0, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        // a^T @ b
        gemm_into(1.0, &a, (2, 2), true, &b, (2, 2), false, 0.0, &mut out);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        // a @ b^T
        gemm_into(1.0, &a, (2, 2), false, &b, (2, 2), true, 0.0, &mut out);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
        // accumulate: beta = 1
        gemm_into(1.0, &a, (2, 2), false, &b, (2, 2), true, 1.0, &mut out);
        assert_eq!(out, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[2]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(t.check_finite("t").is_err());
    }
}

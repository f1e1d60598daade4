//! Dense row-major f64 tensor used by the tape.

use crate::error::{Result, SfmError};

/// A dense 2-D tensor. Row-major `data`, `data.len() == rows * cols`.
///
/// Everything the network and losses need is expressible over matrices;
/// the sparse m x n x d latent is stored packed as one row per observed
/// cell, so no higher-rank storage is required.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(SfmError::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self @ other`, [r,k] x [k,c] -> [r,c].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(SfmError::ShapeMismatch {
                expected: format!("[{}, _] rhs", self.cols),
                got: format!("{:?}", other.shape()),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        dgemm_acc(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

/// `out = alpha * op(a) @ op(b) + beta * out` where `op` optionally
/// transposes. Wraps the blocked kernel in `matrixmultiply`, which is
/// deterministic for fixed inputs.
pub(crate) fn dgemm_acc(
    alpha: f64,
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    beta: f64,
    out: &mut Tensor,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions must agree");
    assert_eq!(out.rows, m);
    assert_eq!(out.cols, n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_in_place(beta);
        return;
    }
    // Row-major strides; a transpose swaps them.
    let (rsa, csa) = if trans_a { (1isize, a.cols as isize) } else { (a.cols as isize, 1isize) };
    let (rsb, csb) = if trans_b { (1isize, b.cols as isize) } else { (b.cols as isize, 1isize) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

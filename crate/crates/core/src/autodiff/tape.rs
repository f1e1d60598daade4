//! Reverse-mode differentiation tape.
//!
//! Eager define-by-run: each op computes its forward value when recorded.
//! Nodes only reference earlier nodes, so the node index order is already
//! a topological order and `backward` is a single reverse sweep.
//!
//! Pooling over the sparse observation structure is expressed with
//! segment means: the packed cell matrix holds one row per observed
//! (camera, track) cell, and `masked_row_mean` / `masked_col_mean` /
//! `masked_global_mean` average rows that share a camera id, a track id,
//! or everything. A group with no member rows yields a zero row and
//! receives zero gradient.

use super::tensor::Tensor;
use crate::error::{Result, SfmError};

/// Clamp bound for probabilities inside the cross-entropy op.
pub const BCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { requires_grad: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// [r,c] + [1,c] broadcast over rows.
    AddRowBroadcast(Var, Var),
    /// k * x + b elementwise; only the slope k matters for the backward pass.
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    /// Mean of rows grouped by segment id.
    SegmentMean { input: Var, seg: Vec<usize>, counts: Vec<usize> },
    /// Row gather: out[i] = input[idx[i]].
    GatherRows { input: Var, idx: Vec<usize> },
    /// Subtract the per-column mean over all rows.
    MeanSubtractRows(Var),
    /// Mean over every entry, yielding a 1x1 tensor.
    MeanAll(Var),
    /// Per-row sum over columns, [r,c] -> [r,1].
    RowSum(Var),
    /// Column slice [r, start..start+len].
    SliceCols { input: Var, start: usize, len: usize },
    /// [r,c] / [r,1] broadcast over columns.
    DivColBroadcast(Var, Var),
    /// Mean binary cross-entropy against constant targets.
    BceMean { input: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output w.r.t. `var`, if any was accumulated.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by tape op");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Register a constant; no gradient is accumulated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b))?;
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data);
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// Add a [1,c] bias row to every row of a [r,c] tensor.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(bias);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("[1, {}]", va.cols()),
                got: format!("{:?}", vb.shape()),
            });
        }
        let mut v = va.clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            for c in 0..cols {
                let x = v.at(r, c) + vb.at(0, c);
                v.set(r, c, x);
            }
        }
        Ok(self.push(v, Op::AddRowBroadcast(a, bias)))
    }

    /// Elementwise `k * x + b` with scalar constants.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let v = self.value(a).map(|x| k * x + b);
        self.push(v, Op::Affine(a, k))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise square root. The derivative at exactly zero is defined
    /// as zero so residual norms of perfectly fit observations are safe.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    fn segment_mean_impl(&mut self, input: Var, seg: Vec<usize>, num_segments: usize) -> Result<Var> {
        let vi = self.value(input);
        if seg.len() != vi.rows() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} segment ids", vi.rows()),
                got: format!("{}", seg.len()),
            });
        }
        let cols = vi.cols();
        let mut sums = Tensor::zeros(num_segments, cols);
        let mut counts = vec![0usize; num_segments];
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < num_segments, "segment id out of range");
            counts[s] += 1;
            for c in 0..cols {
                let x = sums.at(s, c) + vi.at(r, c);
                sums.set(s, c, x);
            }
        }
        for s in 0..num_segments {
            if counts[s] > 0 {
                let n = counts[s] as f64;
                for c in 0..cols {
                    let x = sums.at(s, c) / n;
                    sums.set(s, c, x);
                }
            }
        }
        Ok(self.push(sums, Op::SegmentMean { input, seg, counts }))
    }

    /// Per-camera masked mean: rows of `cells` that share a camera id are
    /// averaged, producing one row per camera.
    pub fn masked_row_mean(&mut self, cells: Var, camera_ids: &[usize], num_cameras: usize) -> Result<Var> {
        self.segment_mean_impl(cells, camera_ids.to_vec(), num_cameras)
    }

    /// Per-track masked mean: one output row per track.
    pub fn masked_col_mean(&mut self, cells: Var, track_ids: &[usize], num_tracks: usize) -> Result<Var> {
        self.segment_mean_impl(cells, track_ids.to_vec(), num_tracks)
    }

    /// Mean over every observed cell, per channel: [p,c] -> [1,c].
    pub fn masked_global_mean(&mut self, cells: Var) -> Result<Var> {
        let rows = self.value(cells).rows();
        self.segment_mean_impl(cells, vec![0; rows], 1)
    }

    /// Subtract the per-channel mean over all rows (observed cells).
    pub fn mean_subtract_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += va.at(r, c);
            }
        }
        if rows > 0 {
            let inv = 1.0 / rows as f64;
            for m in mean.iter_mut() {
                *m *= inv;
            }
        }
        let mut v = va.clone();
        for r in 0..rows {
            for c in 0..cols {
                let x = v.at(r, c) - mean[c];
                v.set(r, c, x);
            }
        }
        self.push(v, Op::MeanSubtractRows(a))
    }

    pub fn gather_rows(&mut self, input: Var, idx: &[usize]) -> Var {
        let vi = self.value(input);
        let cols = vi.cols();
        let mut v = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < vi.rows(), "gather index out of range");
            for c in 0..cols {
                v.set(r, c, vi.at(i, c));
            }
        }
        self.push(v, Op::GatherRows { input, idx: idx.to_vec() })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len().max(1);
        let v = Tensor::scalar(va.data().iter().sum::<f64>() / n as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = Tensor::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            v.set(r, 0, va.row(r).iter().sum());
        }
        self.push(v, Op::RowSum(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "column slice out of range");
        let mut v = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            for c in 0..len {
                v.set(r, c, va.at(r, start + c));
            }
        }
        self.push(v, Op::SliceCols { input: a, start, len })
    }

    /// Divide each row of `a` by the matching entry of a [r,1] column.
    pub fn div_col_broadcast(&mut self, a: Var, denom: Var) -> Result<Var> {
        let va = self.value(a);
        let vd = self.value(denom);
        if vd.rows() != va.rows() || vd.cols() != 1 {
            return Err(SfmError::ShapeMismatch {
                expected: format!("[{}, 1]", va.rows()),
                got: format!("{:?}", vd.shape()),
            });
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            let d = vd.at(r, 0);
            for c in 0..v.cols() {
                let x = v.at(r, c) / d;
                v.set(r, c, x);
            }
        }
        Ok(self.push(v, Op::DivColBroadcast(a, denom)))
    }

    /// Mean binary cross-entropy of predictions in [0,1] against constant
    /// targets, with predictions clamped to [eps, 1-eps], eps = 1e-12.
    pub fn bce(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let vp = self.value(pred);
        if targets.len() != vp.len() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} targets", vp.len()),
                got: format!("{}", targets.len()),
            });
        }
        let n = vp.len().max(1) as f64;
        let mut total = 0.0;
        for (&o, &t) in vp.data().iter().zip(targets) {
            let o = o.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= t * o.ln() + (1.0 - t) * (1.0 - o).ln();
        }
        let v = Tensor::scalar(total / n);
        Ok(self.push(v, Op::BceMean { input: pred, targets: targets.to_vec() }))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output value). Returns accumulated gradients for every node that
    /// needs one; leaves registered with `constant` stay empty.
    pub fn backward(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).check_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // The gradient is moved out and contributions pushed to inputs;
            // put it back afterwards so callers can read every node's grad.
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], var: Var, contrib: Tensor| {
            match &mut grads[var.0] {
                Some(existing) => existing.add_in_place(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if self.wants_grad(*a) {
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    super::tensor::dgemm_acc(1.0, g, false, vb, true, 0.0, &mut da);
                    add_to(grads, *a, da);
                }
                if self.wants_grad(*b) {
                    let mut db = Tensor::zeros(vb.rows(), vb.cols());
                    super::tensor::dgemm_acc(1.0, va, true, g, false, 0.0, &mut db);
                    add_to(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants_grad(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.wants_grad(*b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants_grad(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.wants_grad(*b) {
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    add_to(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if self.wants_grad(*a) {
                    let data = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    add_to(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                if self.wants_grad(*b) {
                    let data = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    add_to(grads, *b, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::Div(a, b) => {
                let vy = &self.nodes[i].value;
                let vb = &self.nodes[b.0].value;
                if self.wants_grad(*a) {
                    let data = g.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
                    add_to(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                if self.wants_grad(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(vy.data().iter().zip(vb.data()))
                        .map(|(gx, (y, b))| -gx * y / b)
                        .collect();
                    add_to(grads, *b, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                if self.wants_grad(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.wants_grad(*bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let x = db.at(0, c) + g.at(r, c);
                            db.set(0, c, x);
                        }
                    }
                    add_to(grads, *bias, db);
                }
            }
            Op::Affine(a, k) => {
                if self.wants_grad(*a) {
                    let mut da = g.clone();
                    da.scale_in_place(*k);
                    add_to(grads, *a, da);
                }
            }
            Op::Relu(a) => {
                if self.wants_grad(*a) {
                    let va = &self.nodes[a.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 })
                        .collect();
                    add_to(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::Sigmoid(a) => {
                if self.wants_grad(*a) {
                    let vy = &self.nodes[i].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(vy.data())
                        .map(|(gx, y)| gx * y * (1.0 - y))
                        .collect();
                    add_to(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::Square(a) => {
                if self.wants_grad(*a) {
                    let va = &self.nodes[a.0].value;
                    let data = g.data().iter().zip(va.data()).map(|(gx, x)| 2.0 * gx * x).collect();
                    add_to(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::Sqrt(a) => {
                if self.wants_grad(*a) {
                    let vy = &self.nodes[i].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(vy.data())
                        .map(|(gx, y)| if *y == 0.0 { 0.0 } else { 0.5 * gx / y })
                        .collect();
                    add_to(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::SegmentMean { input, seg, counts } => {
                if self.wants_grad(*input) {
                    let vi = &self.nodes[input.0].value;
                    let mut da = Tensor::zeros(vi.rows(), vi.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for c in 0..vi.cols() {
                            da.set(r, c, g.at(s, c) * inv);
                        }
                    }
                    add_to(grads, *input, da);
                }
            }
            Op::GatherRows { input, idx } => {
                if self.wants_grad(*input) {
                    let vi = &self.nodes[input.0].value;
                    let mut da = Tensor::zeros(vi.rows(), vi.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..vi.cols() {
                            let x = da.at(src, c) + g.at(r, c);
                            da.set(src, c, x);
                        }
                    }
                    add_to(grads, *input, da);
                }
            }
            Op::MeanSubtractRows(a) => {
                if self.wants_grad(*a) {
                    let rows = g.rows();
                    let cols = g.cols();
                    let mut mean = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            mean[c] += g.at(r, c);
                        }
                    }
                    if rows > 0 {
                        let inv = 1.0 / rows as f64;
                        for m in mean.iter_mut() {
                            *m *= inv;
                        }
                    }
                    let mut da = g.clone();
                    for r in 0..rows {
                        for c in 0..cols {
                            let x = da.at(r, c) - mean[c];
                            da.set(r, c, x);
                        }
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::MeanAll(a) => {
                if self.wants_grad(*a) {
                    let va = &self.nodes[a.0].value;
                    let inv = g.item() / va.len().max(1) as f64;
                    let da = Tensor::from_vec(va.rows(), va.cols(), vec![inv; va.len()]);
                    add_to(grads, *a, da);
                }
            }
            Op::RowSum(a) => {
                if self.wants_grad(*a) {
                    let va = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..va.cols() {
                            da.set(r, c, g.at(r, 0));
                        }
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::SliceCols { input, start, len } => {
                if self.wants_grad(*input) {
                    let vi = &self.nodes[input.0].value;
                    let mut da = Tensor::zeros(vi.rows(), vi.cols());
                    for r in 0..g.rows() {
                        for c in 0..*len {
                            da.set(r, start + c, g.at(r, c));
                        }
                    }
                    add_to(grads, *input, da);
                }
            }
            Op::DivColBroadcast(a, denom) => {
                let va = &self.nodes[a.0].value;
                let vd = &self.nodes[denom.0].value;
                let vy = &self.nodes[i].value;
                if self.wants_grad(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let inv = 1.0 / vd.at(r, 0);
                        for c in 0..da.cols() {
                            let x = da.at(r, c) * inv;
                            da.set(r, c, x);
                        }
                    }
                    add_to(grads, *a, da);
                }
                if self.wants_grad(*denom) {
                    let mut dd = Tensor::zeros(vd.rows(), 1);
                    for r in 0..va.rows() {
                        let mut acc = 0.0;
                        for c in 0..va.cols() {
                            acc += g.at(r, c) * vy.at(r, c);
                        }
                        dd.set(r, 0, -acc / vd.at(r, 0));
                    }
                    add_to(grads, *denom, dd);
                }
            }
            Op::BceMean { input, targets } => {
                if self.wants_grad(*input) {
                    let vi = &self.nodes[input.0].value;
                    let n = vi.len().max(1) as f64;
                    let gs = g.item();
                    let data = vi
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&o, &t)| {
                            if o <= BCE_EPS || o >= 1.0 - BCE_EPS {
                                0.0
                            } else {
                                gs * (-t / o + (1.0 - t) / (1.0 - o)) / n
                            }
                        })
                        .collect();
                    add_to(grads, *input, Tensor::from_vec(vi.rows(), vi.cols(), data));
                }
            }
        }
    }

    /// Whether gradient should flow into this node. Interior nodes always
    /// accept gradient; only constant leaves opt out.
    fn wants_grad(&self, var: Var) -> bool {
        !matches!(self.nodes[var.0].op, Op::Leaf { requires_grad: false })
    }
}

/// Max relative error between the tape gradient of a scalar function and
/// central finite differences with the given step.
///
/// `build` receives leaf vars registered from `inputs` (in order) and must
/// return the scalar output node. The function is rebuilt for every
/// perturbed evaluation, so data-dependent branches are re-resolved; the
/// caller is responsible for keeping inputs away from non-smooth points
/// (ReLU kinks, branch switches).
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out, Tensor::scalar(1.0))?;

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]);
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.map(|g| g.data()[ei]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Threshold below which a vector is treated as zero by `unit_normalize`.
pub const UNIT_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    /// Constant leaf; never receives gradient.
    Input,
    /// Differentiable leaf.
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// x (r x c) + v (r x 1), v replicated across columns.
    AddColBroadcast(NodeId, NodeId),
    /// x (r x c) + v (1 x c), v replicated across rows.
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// Per-row logsumexp; output r x 1.
    LogsumexpRows(NodeId),
    /// Mean across rows; output 1 x c.
    MeanRows(NodeId),
    /// Max across rows (max-over-time); output 1 x c. Saved: argmax row per column.
    MaxRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    /// Sum of the entries at the given (row, col) positions; output 1 x 1.
    SelectSum(NodeId, Vec<(usize, usize)>),
    /// Row vector scaled to unit l2 norm. Saved: the norm (0.0 marks the
    /// guarded zero branch, which passes gradients through unchanged).
    UnitNormalizeRow(NodeId, f64),
    /// Inverted dropout; saved tensor holds 0.0 or 1/(1-p) per entry.
    Dropout(NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive tensor operations supporting one reverse sweep.
///
/// Nodes are appended in execution order, so the record is already
/// topologically sorted; [`Tape::backward`] walks it once in reverse.
/// Shape mismatches are programming errors and panic with the offending
/// op name and shapes.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the node is off every path to the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            _ => self.op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn op_parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddColBroadcast(a, b)
            | Op::AddRowBroadcast(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::GatherCols(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::LogsumexpRows(a)
            | Op::MeanRows(a)
            | Op::MaxRows(a, _)
            | Op::SumAll(a)
            | Op::SelectSum(a, _)
            | Op::UnitNormalizeRow(a, _)
            | Op::Dropout(a, _) => vec![*a],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        }
    }

    /// Register a constant leaf (receives no gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Register a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Param)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "sub shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "mul shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.cols(),
            tb.rows(),
            "matmul shape mismatch: {:?} * {:?}",
            ta.shape(),
            tb.shape()
        );
        let value = ta.matmul(tb);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        self.push(value, Op::Transpose(a))
    }

    pub fn add_col_broadcast(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (tx, tv) = (self.value(x), self.value(v));
        assert!(
            tv.cols() == 1 && tv.rows() == tx.rows(),
            "add_col_broadcast shape mismatch: {:?} + {:?}",
            tx.shape(),
            tv.shape()
        );
        let mut value = tx.clone();
        for r in 0..value.rows() {
            let add = tv.get(r, 0);
            for c in 0..value.cols() {
                let cur = value.get(r, c);
                value.set(r, c, cur + add);
            }
        }
        self.push(value, Op::AddColBroadcast(x, v))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (tx, tv) = (self.value(x), self.value(v));
        assert!(
            tv.rows() == 1 && tv.cols() == tx.cols(),
            "add_row_broadcast shape mismatch: {:?} + {:?}",
            tx.shape(),
            tv.shape()
        );
        let mut value = tx.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let cur = value.get(r, c);
                value.set(r, c, cur + tv.get(0, c));
            }
        }
        self.push(value, Op::AddRowBroadcast(x, v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(
                t.cols(),
                cols,
                "concat_rows column mismatch: {} vs {}",
                t.cols(),
                cols
            );
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(rows, cols, data);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(
                t.rows(),
                rows,
                "concat_cols row mismatch: {} vs {}",
                t.rows(),
                rows
            );
            for r in 0..rows {
                for c in 0..t.cols() {
                    value.set(r, offset + c, t.get(r, c));
                }
            }
            offset += t.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(a);
        assert!(
            start + len <= t.rows(),
            "slice_rows out of range: {}+{} > {}",
            start,
            len,
            t.rows()
        );
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(len, cols, data);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(a);
        assert!(
            start + len <= t.cols(),
            "slice_cols out of range: {}+{} > {}",
            start,
            len,
            t.cols()
        );
        let mut value = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            for c in 0..len {
                value.set(r, c, t.get(r, start + c));
            }
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let t = self.value(a);
        assert!(!indices.is_empty(), "gather_rows with no indices");
        let cols = t.cols();
        let mut value = Tensor::zeros(indices.len(), cols);
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < t.rows(), "gather_rows index {} out of {}", i, t.rows());
            value.row_mut(k).copy_from_slice(t.row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn gather_cols(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let t = self.value(a);
        assert!(!indices.is_empty(), "gather_cols with no indices");
        let mut value = Tensor::zeros(t.rows(), indices.len());
        for (k, &j) in indices.iter().enumerate() {
            assert!(j < t.cols(), "gather_cols index {} out of {}", j, t.cols());
            for r in 0..t.rows() {
                value.set(r, k, t.get(r, j));
            }
        }
        self.push(value, Op::GatherCols(a, indices.to_vec()))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut value = t.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut value = t.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut value = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            value.set(r, 0, logsumexp(t.row(r)));
        }
        self.push(value, Op::LogsumexpRows(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = t.rows() as f64;
        let mut value = Tensor::zeros(1, t.cols());
        for c in 0..t.cols() {
            let mut s = 0.0;
            for r in 0..t.rows() {
                s += t.get(r, c);
            }
            value.set(0, c, s / n);
        }
        self.push(value, Op::MeanRows(a))
    }

    /// Max across rows per column; ties resolve to the lowest row index.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut value = Tensor::zeros(1, t.cols());
        let mut argmax = vec![0usize; t.cols()];
        for c in 0..t.cols() {
            let mut best = t.get(0, c);
            let mut best_r = 0;
            for r in 1..t.rows() {
                let v = t.get(r, c);
                if v > best {
                    best = v;
                    best_r = r;
                }
            }
            value.set(0, c, best);
            argmax[c] = best_r;
        }
        self.push(value, Op::MaxRows(a, argmax))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Sum of entries at the given positions (repeats allowed).
    pub fn select_sum(&mut self, a: NodeId, positions: &[(usize, usize)]) -> NodeId {
        let t = self.value(a);
        let mut s = 0.0;
        for &(r, c) in positions {
            assert!(
                r < t.rows() && c < t.cols(),
                "select_sum position ({}, {}) out of {:?}",
                r,
                c,
                t.shape()
            );
            s += t.get(r, c);
        }
        self.push(Tensor::scalar(s), Op::SelectSum(a, positions.to_vec()))
    }

    /// Scale a row vector to unit l2 norm; rows with norm <= 1e-12 pass
    /// through unchanged (the zero case stays zero without NaN).
    pub fn unit_normalize(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "unit_normalize expects a single row");
        let norm = t.l2_norm();
        if norm <= UNIT_NORM_EPS {
            let value = t.clone();
            self.push(value, Op::UnitNormalizeRow(a, 0.0))
        } else {
            let value = t.map(|v| v / norm);
            self.push(value, Op::UnitNormalizeRow(a, norm))
        }
    }

    /// Inverted dropout: keeps entries with probability `1 - p` and scales
    /// them by `1/(1-p)`, so evaluation needs no rescaling.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
        if p == 0.0 {
            return a;
        }
        let t = self.value(a);
        let keep = 1.0 - p;
        let mask = Tensor::from_vec(
            t.rows(),
            t.cols(),
            (0..t.len())
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let data = t
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::from_vec(t.rows(), t.cols(), data);
        self.push(value, Op::Dropout(a, mask))
    }

    /// Reverse sweep from a scalar loss node. Each node is visited exactly
    /// once; parameters with no path to the loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(&node.op, &node.value, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_in_place(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                );
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul(&tb.transposed());
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = ta.transposed().matmul(g);
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.add_grad(grads, *a, g.transposed()),
            Op::AddColBroadcast(x, v) => {
                self.add_grad(grads, *x, g.clone());
                let mut gv = Tensor::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    gv.set(r, 0, g.row(r).iter().sum());
                }
                self.add_grad(grads, *v, gv);
            }
            Op::AddRowBroadcast(x, v) => {
                self.add_grad(grads, *x, g.clone());
                let mut gv = Tensor::zeros(1, g.cols());
                for c in 0..g.cols() {
                    let mut s = 0.0;
                    for r in 0..g.rows() {
                        s += g.get(r, c);
                    }
                    gv.set(0, c, s);
                }
                self.add_grad(grads, *v, gv);
            }
            Op::Scale(a, s) => self.add_grad(grads, *a, g.map(|v| v * s)),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = g.cols();
                    let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                    self.add_grad(grads, p, Tensor::from_vec(rows, cols, data));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            gp.set(r, c, g.get(r, start + c));
                        }
                    }
                    self.add_grad(grads, p, gp);
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.add_grad(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..g.cols() {
                        let cur = ga.get(i, c);
                        ga.set(i, c, cur + g.get(k, c));
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::GatherCols(a, indices) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for (k, &j) in indices.iter().enumerate() {
                    for r in 0..g.rows() {
                        let cur = ga.get(r, j);
                        ga.set(r, j, cur + g.get(r, k));
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                );
                self.add_grad(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect(),
                );
                self.add_grad(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for c in 0..g.cols() {
                        ga.set(r, c, y[c] * (gr[c] - dot));
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let s: f64 = gr.iter().sum();
                    for c in 0..g.cols() {
                        ga.set(r, c, gr[c] - out.get(r, c).exp() * s);
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::LogsumexpRows(a) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let gv = g.get(r, 0);
                    let lse = out.get(r, 0);
                    for c in 0..t.cols() {
                        ga.set(r, c, gv * (t.get(r, c) - lse).exp());
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let n = t.rows() as f64;
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..t.cols() {
                        ga.set(r, c, g.get(0, c) / n);
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::MaxRows(a, argmax) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for (c, &r) in argmax.iter().enumerate() {
                    ga.set(r, c, g.get(0, c));
                }
                self.add_grad(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                let gv = g.item();
                self.add_grad(grads, *a, Tensor::from_vec(t.rows(), t.cols(), vec![gv; t.len()]));
            }
            Op::SelectSum(a, positions) => {
                let t = self.value(*a);
                let gv = g.item();
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for &(r, c) in positions {
                    let cur = ga.get(r, c);
                    ga.set(r, c, cur + gv);
                }
                self.add_grad(grads, *a, ga);
            }
            Op::UnitNormalizeRow(a, norm) => {
                if *norm == 0.0 {
                    // zero branch: output == input, identity gradient
                    self.add_grad(grads, *a, g.clone());
                } else {
                    // y = x / |x|: dx = (g - (g . y) y) / |x|
                    let dot: f64 = g.data().iter().zip(out.data()).map(|(gv, yv)| gv * yv).sum();
                    let ga = Tensor::from_vec(
                        1,
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .map(|(gv, yv)| (gv - dot * yv) / norm)
                            .collect(),
                    );
                    self.add_grad(grads, *a, ga);
                }
            }
            Op::Dropout(a, mask) => {
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(mask.data())
                        .map(|(gv, m)| gv * m)
                        .collect(),
                );
                self.add_grad(grads, *a, ga);
            }
        }
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

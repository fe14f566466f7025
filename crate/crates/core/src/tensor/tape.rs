//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive as a node holding its forward value
//! and its operands. Operands always precede the node that consumes them,
//! so a single reverse sweep over the node list applies the chain rule.

use super::matrix::softmax_in_place;
use super::{Matrix, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { input: NodeId, inv_std: Vec<f64> },
    Gelu(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    multiplies: u64,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Number of nodes the reverse sweep walked through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplications performed by matrix products recorded so far.
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.is_finite() || !self.all_finite(&op),
            "non-finite value from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn all_finite(&self, op: &Op) -> bool {
        operands(op)
            .iter()
            .all(|id| self.nodes[id.0].value.is_finite())
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.matmul(vb)?;
        self.multiplies += (va.rows() * va.cols() * vb.cols()) as u64;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a + row`, broadcasting the `1 x cols` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let value = self.broadcast_row("add_row", a, row, |x, y| x + y)?;
        let rg = self.grad_of(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `a ⊙ row`, broadcasting the `1 x cols` row over every row of `a`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let value = self.broadcast_row("mul_row", a, row, |x, y| x * y)?;
        let rg = self.grad_of(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    fn broadcast_row(
        &self,
        op: &'static str,
        a: NodeId,
        row: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, TensorError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(TensorError::shape(op, va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, &y) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).softmax_rows();
        let rg = self.grad_of(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardisation to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let n = src.cols() as f64;
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.grad_of(&[a]);
        self.push(value, Op::LayerNormRows { input: a, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(TensorError::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        if len == 0 || start + len > src.rows() {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                shape: src.shape(),
                start,
                len,
            });
        }
        let data = src.data()[start * src.cols()..(start + len) * src.cols()].to_vec();
        let value = Matrix::new(len, src.cols(), data)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::SliceRows { input: a, start }, rg))
    }

    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        if len == 0 || start + len > src.cols() {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                shape: src.shape(),
                start,
                len,
            });
        }
        let mut value = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::SliceCols { input: a, start }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Matrix::scalar(v.sum() / v.len() as f64);
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean softmax cross-entropy of each logit row against its label.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(TensorError::LabelCount {
                rows: z.rows(),
                labels: labels.len(),
            });
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= z.cols() {
                return Err(TensorError::LabelOutOfRange {
                    label: y,
                    classes: z.cols(),
                });
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Matrix::scalar(total / labels.len() as f64);
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<(), TensorError> {
        let mut acc = |id: NodeId, delta: Matrix| -> Result<(), TensorError> {
            if !self.nodes[id.0].requires_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, g.matmul(&vb.transpose())?)?;
                }
                if self.requires_grad(*b) {
                    acc(*b, va.transpose().matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(*row, column_sums(g))?;
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (x, &y) in da.row_mut(r).iter_mut().zip(vr.data()) {
                            *x *= y;
                        }
                    }
                    acc(*a, da)?;
                }
                if self.requires_grad(*row) {
                    acc(*row, column_sums(&g.hadamard(va)?))?;
                }
            }
            Op::Scale(a, factor) => acc(*a, g.scale(*factor))?,
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(*a, dx)?;
            }
            Op::LayerNormRows { input, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut dx = g.clone();
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*input, dx)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = g.hadamard(&x.map(gelu_grad))?;
                acc(*a, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut part = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        part.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    acc(p, part)?;
                }
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                let c = src.cols();
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*input, dx)?;
            }
            Op::SliceCols { input, start } => {
                let src = self.value(*input);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*input, dx)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)]))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64))?;
            }
            Op::CrossEntropy { logits, labels } => {
                let z = self.value(*logits);
                let scale = g[(0, 0)] / labels.len() as f64;
                let mut dz = z.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = dz.row_mut(r);
                    softmax_in_place(row);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, dz)?;
            }
        }
        Ok(())
    }
}

fn operands(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::SoftmaxRows(a)
        | Op::Gelu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::LayerNormRows { input: a, .. }
        | Op::SliceRows { input: a, .. }
        | Op::SliceCols { input: a, .. }
        | Op::CrossEntropy { logits: a, .. } => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn sum_of_product_gives_row_sums_of_b() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let ab = tape.matmul(a, b).unwrap();
        let loss = tape.sum(ab);
        let grads = tape.backward(loss).unwrap();
        // dL/dA = 1 · Bᵀ: every row equals the row sums of B.
        let expected = Matrix::from_rows(&[vec![11.0, 15.0], vec![11.0, 15.0]]).unwrap();
        assert_eq!(grads.get(a).unwrap(), &expected);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = Matrix::row_vector(vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let zid = tape.param(z.clone());
        let loss = tape.cross_entropy(zid, &[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut expected = z.softmax_rows();
        expected[(0, 2)] -= 1.0;
        let got = grads.get(zid).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(a),
            Err(TensorError::NonScalarLoss { shape: (2, 2) })
        ));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(2, 3, 0.5));
        let b = tape.gelu(a);
        let c = tape.add(a, b).unwrap();
        let loss = tape.mean(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.visited(), tape.len());
    }

    #[test]
    fn matmul_counts_multiplies() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(3, 4));
        let b = tape.constant(Matrix::zeros(4, 5));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.multiplies(), 60);
    }
}

//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs
//! and result, and [`Graph::backward`] walks the tape in reverse from a
//! scalar root, accumulating gradients for every node that needs them.
//! Nodes are topologically ordered by construction, so a single reverse
//! sweep suffices.

use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Boolean attention mask: `data[q * cols + k]` is true when query `q` may
/// attend to key `k`. Rows with no visible key produce an all-zero softmax
/// row instead of NaN.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Every query sees every key.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    /// Every query sees exactly the keys flagged visible; used to hide
    /// blank (all-background) tokens from attention.
    pub fn keys_visible(rows: usize, visible: &[bool]) -> Self {
        let mut data = Vec::with_capacity(rows * visible.len());
        for _ in 0..rows {
            data.extend_from_slice(visible);
        }
        Self {
            rows,
            cols: visible.len(),
            data,
        }
    }

    /// Causal mask restricted to visible keys: query `q` sees key `k` iff
    /// `k <= q` and `visible[k]`.
    pub fn causal_keys(rows: usize, visible: &[bool]) -> Self {
        let cols = visible.len();
        let mut data = vec![false; rows * cols];
        for q in 0..rows {
            for k in 0..cols.min(q + 1) {
                data[q * cols + k] = visible[k];
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.data[q * self.cols + k]
    }

    /// And-combine with another mask of identical shape.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot combine masks {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(AttnMask {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a `1 x d` row to every row of an `n x d` tensor.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    MaskedSoftmax(NodeId),
    /// Row-wise layer normalization with learnable gain and bias rows.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GatherRows(NodeId, Rc<Vec<usize>>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, Range<usize>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, Range<usize>),
    Reshape(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a tensor as a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a tensor as a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => self.needs_grad(*a) || self.needs_grad(*b),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::MaskedSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Reshape(a)
            | Op::MeanAll(a) => self.needs_grad(*a),
            Op::LayerNorm { x, gain, bias } => {
                self.needs_grad(*x) || self.needs_grad(*gain) || self.needs_grad(*bias)
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                parts.iter().any(|&p| self.needs_grad(p))
            }
        };
        self.push(value, op, needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut value = ta.clone();
        value.add_scaled(tb, 1.0);
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    /// `a + row` with `row` a `1 x d` tensor broadcast over rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::Shape(format!(
                "add_row expects 1x{} bias, got {:?}",
                ta.cols(),
                tr.shape()
            )));
        }
        let mut value = ta.clone();
        for r in 0..value.rows() {
            let bias = tr.row(0);
            let row_mut = value.row_mut(r);
            for (v, b) in row_mut.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(self.push_op(value, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "sub shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut value = ta.clone();
        value.add_scaled(tb, -1.0);
        Ok(self.push_op(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut value = ta.clone();
        for (v, w) in value.data_mut().iter_mut().zip(tb.data()) {
            *v *= w;
        }
        Ok(self.push_op(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_in_place(factor);
        self.push_op(value, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        self.push_op(value, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push_op(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push_op(value, Op::Tanh(a))
    }

    /// Row-wise softmax over the visible entries of each row; hidden
    /// entries output exactly 0, and rows with no visible entry are
    /// entirely 0 rather than NaN.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: Rc<AttnMask>) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rows() != mask.rows() || z.cols() != mask.cols() {
            return Err(Error::Shape(format!(
                "softmax logits {:?} do not match mask {}x{}",
                z.shape(),
                mask.rows(),
                mask.cols()
            )));
        }
        let mut value = Tensor::zeros(z.rows(), z.cols());
        for q in 0..z.rows() {
            let zr = z.row(q);
            let mut max = f64::NEG_INFINITY;
            for k in 0..z.cols() {
                if mask.visible(q, k) && zr[k] > max {
                    max = zr[k];
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let out = value.row_mut(q);
            let mut sum = 0.0;
            for k in 0..z.cols() {
                if mask.visible(q, k) {
                    let e = (zr[k] - max).exp();
                    out[k] = e;
                    sum += e;
                }
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push_op(value, Op::MaskedSoftmax(logits)))
    }

    /// Row-wise layer normalization: each row is standardized to zero mean
    /// and unit variance (epsilon-stabilized), then scaled by `gain` and
    /// shifted by `bias` (both `1 x d`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != [1, d] || tb.shape() != [1, d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be 1x{d}, got {:?} and {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let mut value = Tensor::zeros(tx.rows(), d);
        for r in 0..tx.rows() {
            let xr = tx.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let out = value.row_mut(r);
            for c in 0..d {
                out[c] = (xr[c] - mean) * inv_std * tg.row(0)[c] + tb.row(0)[c];
            }
        }
        Ok(self.push_op(value, Op::LayerNorm { x, gain, bias }))
    }

    /// `out[i] = table[indices[i]]`; gradient scatter-adds back into the
    /// table, so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId> {
        let t = self.value(table);
        let mut value = Tensor::zeros(indices.len(), t.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= t.rows() {
                return Err(Error::Shape(format!(
                    "gather index {idx} out of range for {} rows",
                    t.rows()
                )));
            }
            value.row_mut(i).copy_from_slice(t.row(idx));
        }
        Ok(self.push_op(value, Op::GatherRows(table, indices)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols needs at least one part".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {rows}",
                    t.rows()
                )));
            }
            let w = t.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, range: Range<usize>) -> Result<NodeId> {
        let t = self.value(a);
        if range.end > t.cols() || range.start >= range.end {
            return Err(Error::Shape(format!(
                "slice_cols {range:?} invalid for {} columns",
                t.cols()
            )));
        }
        let mut value = Tensor::zeros(t.rows(), range.len());
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[range.clone()]);
        }
        Ok(self.push_op(value, Op::SliceCols(a, range)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows needs at least one part".into()));
        }
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut value = Tensor::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {cols}",
                    t.cols()
                )));
            }
            for r in 0..t.rows() {
                value.row_mut(offset + r).copy_from_slice(t.row(r));
            }
            offset += t.rows();
        }
        Ok(self.push_op(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, range: Range<usize>) -> Result<NodeId> {
        let t = self.value(a);
        if range.end > t.rows() || range.start >= range.end {
            return Err(Error::Shape(format!(
                "slice_rows {range:?} invalid for {} rows",
                t.rows()
            )));
        }
        let mut value = Tensor::zeros(range.len(), t.cols());
        for (i, r) in range.clone().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(r));
        }
        Ok(self.push_op(value, Op::SliceRows(a, range)))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rows() * t.cols() != rows * cols {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {rows}x{cols}",
                t.shape()
            )));
        }
        let value = Tensor::new(rows, cols, t.data().to_vec())?;
        Ok(self.push_op(value, Op::Reshape(a)))
    }

    /// Mean of all elements, a `1 x 1` tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = (t.rows() * t.cols()) as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let value = Tensor::new(1, 1, vec![mean]).expect("1x1 tensor");
        self.push_op(value, Op::MeanAll(a))
    }

    /// Convenience: mean of squared differences between two same-shape nodes.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from a `1 x 1` root node. Returns per-node gradients;
    /// nodes not needing gradients (or unreachable from the root) have none.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.shape() != [1, 1] {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {:?}",
                rt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(1, 1, vec![1.0])?);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(
        &self,
        node: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let add_into = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => acc.add_scaled(&delta, 1.0),
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    let da = matmul_nt(g, self.value(*b))?;
                    add_into(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let db = matmul_tn(self.value(*a), g)?;
                    add_into(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    add_into(grads, *a, g.clone());
                }
                if self.needs_grad(*b) {
                    add_into(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs_grad(*a) {
                    add_into(grads, *a, g.clone());
                }
                if self.needs_grad(*row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        for (acc, v) in dr.row_mut(0).iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    add_into(grads, *row, dr);
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*a) {
                    add_into(grads, *a, g.clone());
                }
                if self.needs_grad(*b) {
                    let mut db = g.clone();
                    db.scale_in_place(-1.0);
                    add_into(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let mut da = g.clone();
                    for (v, w) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *v *= w;
                    }
                    add_into(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = g.clone();
                    for (v, w) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *v *= w;
                    }
                    add_into(grads, *b, db);
                }
            }
            Op::Scale(a, factor) => {
                if self.needs_grad(*a) {
                    let mut da = g.clone();
                    da.scale_in_place(*factor);
                    add_into(grads, *a, da);
                }
            }
            Op::Transpose(a) => {
                if self.needs_grad(*a) {
                    add_into(grads, *a, g.transposed());
                }
            }
            Op::Relu(a) => {
                if self.needs_grad(*a) {
                    let mut da = g.clone();
                    for (v, x) in da.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *x <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    add_into(grads, *a, da);
                }
            }
            Op::Tanh(a) => {
                if self.needs_grad(*a) {
                    let y = &self.nodes[node].value;
                    let mut da = g.clone();
                    for (v, t) in da.data_mut().iter_mut().zip(y.data()) {
                        *v *= 1.0 - t * t;
                    }
                    add_into(grads, *a, da);
                }
            }
            Op::MaskedSoftmax(a) => {
                if self.needs_grad(*a) {
                    // dz_k = y_k * (g_k - sum_j g_j y_j) per row; masked
                    // entries have y = 0 so their gradient is 0.
                    let y = &self.nodes[node].value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = da.row_mut(r);
                        for k in 0..yr.len() {
                            out[k] = yr[k] * (gr[k] - dot);
                        }
                    }
                    add_into(grads, *a, da);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let d = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                let mut xhat = vec![0.0; d];
                let mut h = vec![0.0; d];
                for r in 0..tx.rows() {
                    let xr = tx.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var =
                        xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for c in 0..d {
                        xhat[c] = (xr[c] - mean) * inv_std;
                        h[c] = tg.row(0)[c] * gr[c];
                    }
                    for c in 0..d {
                        dgain.row_mut(0)[c] += gr[c] * xhat[c];
                        dbias.row_mut(0)[c] += gr[c];
                    }
                    let mean_h = h.iter().sum::<f64>() / d as f64;
                    let mean_hx = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        out[c] = (h[c] - mean_h - xhat[c] * mean_hx) * inv_std;
                    }
                }
                if self.needs_grad(*x) {
                    add_into(grads, *x, dx);
                }
                if self.needs_grad(*gain) {
                    add_into(grads, *gain, dgain);
                }
                if self.needs_grad(*bias) {
                    add_into(grads, *bias, dbias);
                }
            }
            Op::GatherRows(table, indices) => {
                if self.needs_grad(*table) {
                    let t = self.value(*table);
                    let mut dt = Tensor::zeros(t.rows(), t.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        let src = g.row(i);
                        for (acc, v) in dt.row_mut(idx).iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    add_into(grads, *table, dt);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        add_into(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, range) => {
                if self.needs_grad(*a) {
                    let t = self.value(*a);
                    let mut da = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[range.clone()].copy_from_slice(g.row(r));
                    }
                    add_into(grads, *a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs_grad(p) {
                        let mut dp = Tensor::zeros(h, g.cols());
                        for r in 0..h {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        add_into(grads, p, dp);
                    }
                    offset += h;
                }
            }
            Op::SliceRows(a, range) => {
                if self.needs_grad(*a) {
                    let t = self.value(*a);
                    let mut da = Tensor::zeros(t.rows(), t.cols());
                    for (i, r) in range.clone().enumerate() {
                        da.row_mut(r).copy_from_slice(g.row(i));
                    }
                    add_into(grads, *a, da);
                }
            }
            Op::Reshape(a) => {
                if self.needs_grad(*a) {
                    let t = self.value(*a);
                    let da = Tensor::new(t.rows(), t.cols(), g.data().to_vec())?;
                    add_into(grads, *a, da);
                }
            }
            Op::MeanAll(a) => {
                if self.needs_grad(*a) {
                    let t = self.value(*a);
                    let n = (t.rows() * t.cols()) as f64;
                    let da = Tensor::filled(t.rows(), t.cols(), g.at(0, 0) / n);
                    add_into(grads, *a, da);
                }
            }
        }
        Ok(())
    }
}

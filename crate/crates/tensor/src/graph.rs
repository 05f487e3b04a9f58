//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is executed. Nodes are appended in
//! execution order, so the tape is already a topological order and
//! [`Graph::backward`] simply walks it in reverse, visiting each node once.

use std::sync::Arc;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::tensor::{gemm, gemm_raw, Operand, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A block-diagonal constant matrix made of dense square blocks.
///
/// Used to run GCN propagation over a batch of variable-size graphs at once:
/// each block is one graph's normalized adjacency.
#[derive(Debug, Clone, Default)]
pub struct BlockDiag {
    blocks: Vec<DenseBlock>,
    dim: usize,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    offset: usize,
    size: usize,
    values: Vec<f64>,
}

impl BlockDiag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a `size × size` row-major block after the existing ones.
    pub fn push_block(&mut self, size: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != size * size {
            return Err(invalid("block_diag", "block is not square"));
        }
        self.blocks.push(DenseBlock {
            offset: self.dim,
            size,
            values,
        });
        self.dim += size;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.dim, self.dim);
        for b in &self.blocks {
            for r in 0..b.size {
                for c in 0..b.size {
                    out.set(b.offset + r, b.offset + c, b.values[r * b.size + c]);
                }
            }
        }
        out
    }
}

/// Shape information for [`Graph::causal_attention`].
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    /// Tokens per sequence; rows of q/k/v are `num_sequences · seq_len`.
    pub seq_len: usize,
    pub heads: usize,
    /// Per-row flag; `false` rows are never attended to (padding).
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        index: Vec<usize>,
    },
    RowDot(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    Reshape(Var),
    BlockDiagMatMul {
        adj: Arc<BlockDiag>,
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// participate in the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads.get_mut(var.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, &sa, &sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + 1ᵀ·row`: adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(mismatch("add_row", &tx.shape(), &tr.shape()));
        }
        let mut out = tx.clone();
        let bias = tr.data().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Softmax over each row, max-subtracted.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::RowSoftmax(x), rg)
    }

    /// Row-wise layer normalization followed by an affine `gain`/`bias` (`1 × c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(TensorError::EmptyRows);
        }
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.shape() != [1, c] {
                return Err(mismatch("layer_norm", &tx.shape(), &tp.shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Tensor::zeros(tx.rows(), c);
        let mut out = Tensor::zeros(tx.rows(), c);
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_slice_mut(r);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_slice_mut(r);
            for j in 0..c {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows, `n × c → 1 × c`. Zero rows give a zero row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(1, tx.cols());
        if tx.rows() > 0 {
            let inv = 1.0 / tx.rows() as f64;
            for r in 0..tx.rows() {
                for (o, v) in out.row_slice_mut(0).iter_mut().zip(tx.row_slice(r)) {
                    *o += v * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Mean over each `(start, len)` row segment, giving one output row per
    /// segment. Empty segments give zero rows.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Result<Var> {
        let tx = self.value(x);
        let mut out = Tensor::zeros(segments.len(), tx.cols());
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > tx.rows() {
                return Err(invalid("segment_mean", "segment out of range"));
            }
            if len == 0 {
                continue;
            }
            let inv = 1.0 / len as f64;
            for r in start..start + len {
                let src = tx.row_slice(r).to_vec();
                for (o, v) in out.row_slice_mut(s).iter_mut().zip(&src) {
                    *o += v * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentMean { x, segments }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(invalid("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", &[rows, cols], &t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(invalid("slice_rows", "range out of bounds"));
        }
        let c = tx.cols();
        let out = Tensor::from_vec(len, c, tx.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= tx.rows() {
                return Err(invalid("gather_rows", format!("row {i} of {}", tx.rows())));
            }
            data.extend_from_slice(tx.row_slice(i));
        }
        let out = Tensor::from_vec(index.len(), c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows { x, index }, rg))
    }

    /// Looks up rows of an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `out[index[r]] += x[r]` into a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if index.len() != tx.rows() {
            return Err(invalid("scatter_rows", "index length differs from rows"));
        }
        let c = tx.cols();
        let mut out = Tensor::zeros(rows, c);
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(invalid("scatter_rows", format!("row {i} of {rows}")));
            }
            let src = tx.row_slice(r);
            for (o, v) in out.row_slice_mut(i).iter_mut().zip(src) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ScatterRows { x, index }, rg))
    }

    /// Row-wise inner products, `n × c, n × c → n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..ta.rows())
            .map(|r| {
                ta.row_slice(r)
                    .iter()
                    .zip(tb.row_slice(r))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::from_vec(ta.rows(), 1, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Full inner product of two same-shape tensors, giving a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Multiplies a constant block-diagonal matrix into `x`.
    pub fn block_diag_matmul(&mut self, adj: Arc<BlockDiag>, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if adj.dim != tx.rows() {
            return Err(mismatch("block_diag_matmul", &[adj.dim, adj.dim], &tx.shape()));
        }
        let c = tx.cols();
        let mut out = Tensor::zeros(tx.rows(), c);
        for b in &adj.blocks {
            let src = &tx.data()[b.offset * c..(b.offset + b.size) * c];
            let dst = &mut out.data_mut()[b.offset * c..(b.offset + b.size) * c];
            gemm_raw(
                Operand::raw(&b.values, b.size, b.size),
                Operand::raw(src, b.size, c),
                dst,
                b.size,
                c,
                0.0,
            );
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::BlockDiagMatMul { adj, x }, rg))
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(num_sequences · seq_len) × d`, heads split the
    /// columns evenly. Query `i` of a sequence attends to keys `j ≤ i` whose
    /// `key_valid` flag is set; a query with no admissible key outputs zeros.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (tq.rows(), tq.cols());
        let (s_len, heads) = (layout.seq_len, layout.heads);
        if s_len == 0 || rows % s_len != 0 || heads == 0 || d % heads != 0 {
            return Err(invalid("attention", "layout does not divide the input"));
        }
        if layout.key_valid.len() != rows {
            return Err(invalid("attention", "key_valid length differs from rows"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nseq = rows / s_len;
        let mut probs = vec![0.0; nseq * heads * s_len * s_len];
        let mut out = Tensor::zeros(rows, d);
        let mut scores = vec![0.0; s_len];
        for s in 0..nseq {
            let base = s * s_len;
            for h in 0..heads {
                let cs = h * dh;
                for i in 0..s_len {
                    let qi = &tq.row_slice(base + i)[cs..cs + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if !layout.key_valid[base + j] {
                            continue;
                        }
                        let kj = &tk.row_slice(base + j)[cs..cs + dh];
                        let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut probs[((s * heads + h) * s_len + i) * s_len..][..s_len];
                    let mut z = 0.0;
                    for j in 0..=i {
                        if layout.key_valid[base + j] {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.row_slice_mut(base + i)[cs..cs + dh];
                    for j in 0..=i {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        prow[j] /= z;
                        let p = prow[j];
                        let vj = &tv.row_slice(base + j)[cs..cs + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate over every path, so a value used `k` times receives
    /// the sum of its `k` path gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    gemm(Operand::plain(g), Operand::transposed(tb), &mut da, 0.0);
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    gemm(Operand::transposed(ta), Operand::plain(g), &mut db, 0.0);
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, elementwise(g, val(*b), |x, y| x * y))?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, elementwise(g, val(*a), |x, y| x * y))?;
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*row) {
                    self.accumulate(grads, *row, column_sums(g))?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s))?,
            Op::Relu(x) => {
                let gx = elementwise(g, &node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx)?;
            }
            Op::Gelu(x) => {
                let gx = elementwise(g, val(*x), |gv, v| {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = elementwise(g, &node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *x, gx)?;
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = xhat.cols();
                let gv = val(*gain).data();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(xhat.rows(), c);
                    for r in 0..xhat.rows() {
                        let (xh, gr) = (xhat.row_slice(r), g.row_slice(r));
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in gx.row_slice_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.needs(*gain) {
                    let mut gg = Tensor::zeros(1, c);
                    for r in 0..xhat.rows() {
                        for (o, (a, b)) in gg
                            .row_slice_mut(0)
                            .iter_mut()
                            .zip(g.row_slice(r).iter().zip(xhat.row_slice(r)))
                        {
                            *o += a * b;
                        }
                    }
                    self.accumulate(grads, *gain, gg)?;
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, column_sums(g))?;
                }
            }
            Op::MeanRows(x) => {
                let tx = val(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                if tx.rows() > 0 {
                    let inv = 1.0 / tx.rows() as f64;
                    for r in 0..tx.rows() {
                        for (o, v) in gx.row_slice_mut(r).iter_mut().zip(g.row_slice(0)) {
                            *o = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::SegmentMean { x, segments } => {
                let tx = val(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    if len == 0 {
                        continue;
                    }
                    let inv = 1.0 / len as f64;
                    for r in start..start + len {
                        for (o, v) in gx.row_slice_mut(r).iter_mut().zip(g.row_slice(s)) {
                            *o += v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if self.needs(p) {
                        let part = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(r, c, part)?)?;
                    }
                    offset += r;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.rows(), c);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx)?;
            }
            Op::GatherRows { x, index } => {
                let tx = val(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in gx.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ScatterRows { x, index } => {
                let tx = val(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for (r, &i) in index.iter().enumerate() {
                    gx.row_slice_mut(r).copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                for (target, other) in [(*a, tb), (*b, ta)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let mut gt = other.clone();
                    for r in 0..gt.rows() {
                        let s = g.get(r, 0);
                        for v in gt.row_slice_mut(r) {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, target, gt)?;
                }
            }
            Op::Dot(a, b) => {
                let s = g.data()[0];
                if self.needs(*a) {
                    self.accumulate(grads, *a, val(*b).map(|v| v * s))?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, val(*a).map(|v| v * s))?;
                }
            }
            Op::Sum(x) => {
                let tx = val(*x);
                self.accumulate(grads, *x, Tensor::filled(tx.rows(), tx.cols(), g.data()[0]))?;
            }
            Op::Reshape(x) => {
                let tx = val(*x);
                self.accumulate(
                    grads,
                    *x,
                    Tensor::from_vec(tx.rows(), tx.cols(), g.data().to_vec())?,
                )?;
            }
            Op::BlockDiagMatMul { adj, x } => {
                let c = g.cols();
                let mut gx = Tensor::zeros(g.rows(), c);
                for b in &adj.blocks {
                    let src = &g.data()[b.offset * c..(b.offset + b.size) * c];
                    let dst = &mut gx.data_mut()[b.offset * c..(b.offset + b.size) * c];
                    let blk = Tensor::from_vec(b.size, b.size, b.values.clone())?;
                    gemm_raw(
                        Operand::transposed(&blk),
                        Operand::raw(src, b.size, c),
                        dst,
                        b.size,
                        c,
                        0.0,
                    );
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(val(*q), val(*k), val(*v), layout, probs, g);
                self.accumulate(grads, *q, gq)?;
                self.accumulate(grads, *k, gk)?;
                self.accumulate(grads, *v, gv)?;
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return;
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_slice_mut(0).iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = (q.rows(), q.cols());
    let (s_len, heads) = (layout.seq_len, layout.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nseq = rows / s_len;
    let mut gq = Tensor::zeros(rows, d);
    let mut gk = Tensor::zeros(rows, d);
    let mut gv = Tensor::zeros(rows, d);
    let mut dp = vec![0.0; s_len];
    for s in 0..nseq {
        let base = s * s_len;
        for h in 0..heads {
            let cs = h * dh;
            for i in 0..s_len {
                let prow = &probs[((s * heads + h) * s_len + i) * s_len..][..s_len];
                let go = &g.row_slice(base + i)[cs..cs + dh];
                let mut weighted = 0.0;
                for j in 0..=i {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v.row_slice(base + j)[cs..cs + dh];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += prow[j] * dp[j];
                    let gvj = &mut gv.row_slice_mut(base + j)[cs..cs + dh];
                    for (o, x) in gvj.iter_mut().zip(go) {
                        *o += prow[j] * x;
                    }
                }
                for j in 0..=i {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let kj = k.row_slice(base + j)[cs..cs + dh].to_vec();
                    let qi = q.row_slice(base + i)[cs..cs + dh].to_vec();
                    for (o, x) in gq.row_slice_mut(base + i)[cs..cs + dh].iter_mut().zip(&kj) {
                        *o += ds * x;
                    }
                    for (o, x) in gk.row_slice_mut(base + j)[cs..cs + dh].iter_mut().zip(&qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

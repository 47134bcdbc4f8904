//! Dense 2-D tensor math with reverse-mode automatic differentiation.
//!
//! Everything is a row-major matrix of `f64`; scalars are 1×1. A [`Graph`]
//! records one forward pass as a flat tape of nodes, [`Graph::backward`]
//! replays it in reverse to produce parameter gradients, and the tape is
//! dropped afterwards. Parameters live outside the graph in a [`Params`]
//! registry so the same weights can be replayed through many graphs; a
//! graph leaf copies the parameter values at build time.
//!
//! Design notes:
//! - `f64` everywhere: gradients are validated against central finite
//!   differences, which needs the headroom.
//! - Shape mismatches are programming errors and panic with the op name
//!   and both shapes.
//! - Masked softmax takes an additive mask; `-inf` entries produce an
//!   attention weight of exactly `0.0`, and a fully-blocked row yields an
//!   all-zero output rather than NaN.
//! - Graphs are built and differentiated on a single thread; `Params` and
//!   plain values can move freely between threads.

use serde::{Deserialize, Serialize};

/// Additive-mask value that blocks an entry in [`Graph::masked_softmax_rows`].
pub const BLOCKED: f64 = f64::NEG_INFINITY;

/// Epsilon inside layer normalization's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a parameter tensor inside a [`Params`] registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Frozen tensors (`requires_grad == false`) receive no gradient
    /// entries, so optimizers skip them.
    pub requires_grad: bool,
}

/// Registry of all trainable (and frozen) tensors of a model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Params {
    tensors: Vec<ParamTensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(
            rows * cols,
            data.len(),
            "param {name}: {rows}x{cols} shape does not match {} values",
            data.len()
        );
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            data,
            requires_grad: true,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor initialized uniformly in `[-scale, scale)`, sampled
    /// row-major so the layout is part of the reproducibility contract.
    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl rand::Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        self.add(name, rows, cols, data)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        (self.tensors[id.0].rows, self.tensors[id.0].cols)
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].requires_grad = flag;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }
}

/// Handle to a node of a [`Graph`]. Cheap to copy; valid only for the
/// graph that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients keyed by parameter, sorted by [`ParamId`]. Parameters that do
/// not influence the differentiated scalar — frozen ones included — have
/// no entry.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    entries: Vec<(ParamId, Vec<f64>)>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .binary_search_by_key(&id, |(k, _)| *k)
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Adds `scale * other` into this map, inserting missing entries.
    /// Used to accumulate per-image gradients across a minibatch.
    pub fn accumulate(&mut self, other: &Grads, scale: f64) {
        for (id, g) in other.iter() {
            match self.entries.binary_search_by_key(&id, |(k, _)| *k) {
                Ok(i) => {
                    let buf = &mut self.entries[i].1;
                    for (b, &v) in buf.iter_mut().zip(g) {
                        *b += scale * v;
                    }
                }
                Err(i) => {
                    self.entries.insert(i, (id, g.iter().map(|&v| scale * v).collect()));
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    Neg(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    AddRowVec(usize, usize),
    MulRowVec(usize, usize),
    SoftmaxRows(usize),
    // The mask is consumed at forward time; the backward rule only needs
    // the output weights (blocked positions carry weight exactly 0).
    MaskedSoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize),
    SumAll(usize),
    MeanAll(usize),
    GatherRows { x: usize, rows: Vec<usize> },
    GatherCols { x: usize, cols: Vec<usize> },
    GatherEntries { x: usize, entries: Vec<(usize, usize)> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, usize)>,
}

// out(m×n) += a(m×k) · b(k×n)
fn matmul_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out(m×k) += a(m×n) · b(k×n)ᵀ
fn matmul_nt_acc(out: &mut [f64], a: &[f64], m: usize, n: usize, b: &[f64], k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// out(k×n) += a(m×k)ᵀ · b(m×n)
fn matmul_tn_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Tensor {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { op, rows, cols, value, needs_grad });
        Tensor { id: self.nodes.len() - 1, rows, cols }
    }

    fn val(&self, id: usize) -> &[f64] {
        &self.nodes[id].value
    }

    /// Forward value of a tensor.
    pub fn value(&self, t: Tensor) -> &[f64] {
        self.val(t.id)
    }

    /// Forward value of a 1×1 tensor.
    pub fn value_scalar(&self, t: Tensor) -> f64 {
        assert!(
            t.rows == 1 && t.cols == 1,
            "value_scalar: expected 1x1, got {}x{}",
            t.rows,
            t.cols
        );
        self.nodes[t.id].value[0]
    }

    /// Leaf holding a parameter's current values. Repeated calls for the
    /// same parameter return the same node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Tensor {
        if let Some(&(_, node)) = self.param_leaves.iter().find(|(pid, _)| *pid == id) {
            let n = &self.nodes[node];
            return Tensor { id: node, rows: n.rows, cols: n.cols };
        }
        let (rows, cols) = params.shape(id);
        let t = self.push(
            Op::Param(id),
            rows,
            cols,
            params.data(id).to_vec(),
            params.requires_grad(id),
        );
        self.param_leaves.push((id, t.id));
        t
    }

    /// Leaf holding fixed values; receives no gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(
            rows * cols,
            data.len(),
            "constant: {rows}x{cols} shape does not match {} values",
            data.len()
        );
        self.push(Op::Constant, rows, cols, data, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Tensor {
        self.push(Op::Constant, 1, 1, vec![x], false)
    }

    fn assert_same_shape(&self, op: &str, a: Tensor, b: Tensor) {
        assert!(
            a.rows == b.rows && a.cols == b.cols,
            "{op}: incompatible shapes {}x{} and {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
    }

    fn binary_elementwise(
        &mut self,
        name: &str,
        a: Tensor,
        b: Tensor,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Tensor {
        self.assert_same_shape(name, a, b);
        let value = self
            .val(a.id)
            .iter()
            .zip(self.val(b.id))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        self.push(op(a.id, b.id), a.rows, a.cols, value, needs)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise("div", a, b, Op::Div, |x, y| x / y)
    }

    /// Elementwise minimum; on ties the gradient flows to the first input.
    pub fn min(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise("min", a, b, Op::Min, |x, y| if x <= y { x } else { y })
    }

    /// Elementwise maximum; on ties the gradient flows to the first input.
    pub fn max(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary_elementwise("max", a, b, Op::Max, |x, y| if x >= y { x } else { y })
    }

    fn unary_elementwise(
        &mut self,
        a: Tensor,
        op: fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Tensor {
        let value = self.val(a.id).iter().map(|&x| f(x)).collect();
        let needs = self.nodes[a.id].needs_grad;
        self.push(op(a.id), a.rows, a.cols, value, needs)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.unary_elementwise(a, Op::Neg, |x| -x)
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        self.unary_elementwise(a, Op::Abs, f64::abs)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary_elementwise(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary_elementwise(a, Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary_elementwise(a, Op::Exp, f64::exp)
    }

    /// Natural log; defined for strictly positive inputs.
    pub fn ln(&mut self, a: Tensor) -> Tensor {
        self.unary_elementwise(a, Op::Ln, f64::ln)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.val(a.id).iter().map(|&x| c * x).collect();
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::Scale(a.id, c), a.rows, a.cols, value, needs)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.val(a.id).iter().map(|&x| x + c).collect();
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::AddScalar(a.id), a.rows, a.cols, value, needs)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert!(
            a.cols == b.rows,
            "matmul: incompatible shapes {}x{} and {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let mut value = vec![0.0; a.rows * b.cols];
        matmul_acc(&mut value, self.val(a.id), a.rows, a.cols, self.val(b.id), b.cols);
        let needs = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        self.push(Op::MatMul(a.id, b.id), a.rows, b.cols, value, needs)
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let src = self.val(a.id);
        let mut value = vec![0.0; src.len()];
        for i in 0..a.rows {
            for j in 0..a.cols {
                value[j * a.rows + i] = src[i * a.cols + j];
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::Transpose(a.id), a.cols, a.rows, value, needs)
    }

    /// Reinterprets the row-major data under a new shape with equal length.
    pub fn reshape(&mut self, a: Tensor, rows: usize, cols: usize) -> Tensor {
        assert!(
            rows * cols == a.rows * a.cols,
            "reshape: incompatible shapes {}x{} and {}x{}",
            a.rows,
            a.cols,
            rows,
            cols
        );
        let value = self.val(a.id).to_vec();
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::Reshape(a.id), rows, cols, value, needs)
    }

    /// Adds a 1×n row vector to every row of an m×n matrix.
    pub fn add_row_vec(&mut self, a: Tensor, v: Tensor) -> Tensor {
        assert!(
            v.rows == 1 && v.cols == a.cols,
            "add_row_vec: incompatible shapes {}x{} and {}x{}",
            a.rows,
            a.cols,
            v.rows,
            v.cols
        );
        let vv = self.val(v.id).to_vec();
        let value = self
            .val(a.id)
            .chunks_exact(a.cols)
            .flat_map(|row| row.iter().zip(&vv).map(|(&x, &y)| x + y).collect::<Vec<_>>())
            .collect();
        let needs = self.nodes[a.id].needs_grad || self.nodes[v.id].needs_grad;
        self.push(Op::AddRowVec(a.id, v.id), a.rows, a.cols, value, needs)
    }

    /// Multiplies every row of an m×n matrix elementwise by a 1×n vector.
    pub fn mul_row_vec(&mut self, a: Tensor, v: Tensor) -> Tensor {
        assert!(
            v.rows == 1 && v.cols == a.cols,
            "mul_row_vec: incompatible shapes {}x{} and {}x{}",
            a.rows,
            a.cols,
            v.rows,
            v.cols
        );
        let vv = self.val(v.id).to_vec();
        let value = self
            .val(a.id)
            .chunks_exact(a.cols)
            .flat_map(|row| row.iter().zip(&vv).map(|(&x, &y)| x * y).collect::<Vec<_>>())
            .collect();
        let needs = self.nodes[a.id].needs_grad || self.nodes[v.id].needs_grad;
        self.push(Op::MulRowVec(a.id, v.id), a.rows, a.cols, value, needs)
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Tensor {
        let mut value = vec![0.0; a.len()];
        for (out, row) in value.chunks_exact_mut(a.cols).zip(self.val(a.id).chunks_exact(a.cols)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mx).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::SoftmaxRows(a.id), a.rows, a.cols, value, needs)
    }

    /// Row-wise softmax of `a + mask`. Finite mask entries act as additive
    /// offsets; non-finite entries (use [`BLOCKED`]) are excluded entirely
    /// and their output weight is exactly `0.0`. A row with every entry
    /// blocked yields all zeros.
    pub fn masked_softmax_rows(&mut self, a: Tensor, mask: &[f64]) -> Tensor {
        assert!(
            mask.len() == a.len(),
            "masked_softmax_rows: incompatible shapes {}x{} and mask of length {}",
            a.rows,
            a.cols,
            mask.len()
        );
        let mut value = vec![0.0; a.len()];
        for r in 0..a.rows {
            let row = &self.nodes[a.id].value[r * a.cols..(r + 1) * a.cols];
            let mrow = &mask[r * a.cols..(r + 1) * a.cols];
            let mut mx = f64::NEG_INFINITY;
            for (&x, &m) in row.iter().zip(mrow) {
                if m.is_finite() {
                    mx = mx.max(x + m);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully blocked row stays all-zero
            }
            let out = &mut value[r * a.cols..(r + 1) * a.cols];
            let mut denom = 0.0;
            for ((o, &x), &m) in out.iter_mut().zip(row).zip(mrow) {
                if m.is_finite() {
                    *o = (x + m - mx).exp();
                    denom += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::MaskedSoftmaxRows(a.id), a.rows, a.cols, value, needs)
    }

    pub fn log_softmax_rows(&mut self, a: Tensor) -> Tensor {
        let mut value = vec![0.0; a.len()];
        for (out, row) in value.chunks_exact_mut(a.cols).zip(self.val(a.id).chunks_exact(a.cols)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::LogSoftmaxRows(a.id), a.rows, a.cols, value, needs)
    }

    /// Normalizes each row to mean 0 and (biased) variance 1, with
    /// [`LAYER_NORM_EPS`] inside the square root. Affine transforms are
    /// composed separately from [`Graph::mul_row_vec`] / [`Graph::add_row_vec`].
    pub fn layer_norm_rows(&mut self, a: Tensor) -> Tensor {
        let n = a.cols as f64;
        let mut value = vec![0.0; a.len()];
        for (out, row) in value.chunks_exact_mut(a.cols).zip(self.val(a.id).chunks_exact(a.cols)) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::LayerNormRows(a.id), a.rows, a.cols, value, needs)
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let total = self.val(a.id).iter().sum();
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::SumAll(a.id), 1, 1, vec![total], needs)
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        assert!(a.len() > 0, "mean_all: empty tensor");
        let total = self.val(a.id).iter().sum::<f64>() / a.len() as f64;
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::MeanAll(a.id), 1, 1, vec![total], needs)
    }

    /// Selects rows by index (duplicates allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Tensor, rows: &[usize]) -> Tensor {
        let mut value = Vec::with_capacity(rows.len() * a.cols);
        for &r in rows {
            assert!(r < a.rows, "gather_rows: row {r} out of bounds for {}x{}", a.rows, a.cols);
            value.extend_from_slice(&self.nodes[a.id].value[r * a.cols..(r + 1) * a.cols]);
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::GatherRows { x: a.id, rows: rows.to_vec() }, rows.len(), a.cols, value, needs)
    }

    /// Selects columns by index (duplicates allowed).
    pub fn gather_cols(&mut self, a: Tensor, cols: &[usize]) -> Tensor {
        let mut value = Vec::with_capacity(a.rows * cols.len());
        for r in 0..a.rows {
            let row = &self.nodes[a.id].value[r * a.cols..(r + 1) * a.cols];
            for &c in cols {
                assert!(c < a.cols, "gather_cols: column {c} out of bounds for {}x{}", a.rows, a.cols);
                value.push(row[c]);
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::GatherCols { x: a.id, cols: cols.to_vec() }, a.rows, cols.len(), value, needs)
    }

    /// Selects individual entries `(row, col)` into a k×1 column.
    pub fn gather_entries(&mut self, a: Tensor, entries: &[(usize, usize)]) -> Tensor {
        let mut value = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            assert!(
                r < a.rows && c < a.cols,
                "gather_entries: entry ({r},{c}) out of bounds for {}x{}",
                a.rows,
                a.cols
            );
            value.push(self.nodes[a.id].value[r * a.cols + c]);
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(
            Op::GatherEntries { x: a.id, entries: entries.to_vec() },
            entries.len(),
            1,
            value,
            needs,
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = parts[0].cols;
        let mut value = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for p in parts {
            assert!(
                p.cols == cols,
                "concat_rows: incompatible shapes {}x{} and {}x{}",
                parts[0].rows,
                cols,
                p.rows,
                p.cols
            );
            value.extend_from_slice(self.val(p.id));
            rows += p.rows;
            needs |= self.nodes[p.id].needs_grad;
        }
        self.push(Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rows, cols, value, needs)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut needs = false;
        for p in parts {
            assert!(
                p.rows == rows,
                "concat_cols: incompatible shapes {}x{} and {}x{}",
                rows,
                parts[0].cols,
                p.rows,
                p.cols
            );
            needs |= self.nodes[p.id].needs_grad;
        }
        let mut value = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            for r in 0..rows {
                let src = &self.nodes[p.id].value[r * p.cols..(r + 1) * p.cols];
                value[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(src);
            }
            offset += p.cols;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rows, cols, value, needs)
    }

    /// Reverse-mode sweep from a scalar root. Returns gradients for every
    /// reachable parameter leaf with `requires_grad`; a root with no such
    /// ancestors yields an empty map.
    pub fn backward(&self, root: Tensor) -> Grads {
        assert!(
            root.rows == 1 && root.cols == 1,
            "backward: root must be a scalar, got {}x{}",
            root.rows,
            root.cols
        );
        let mut entries: Vec<(ParamId, Vec<f64>)> = Vec::new();
        if self.nodes[root.id].needs_grad {
            let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
            grads.resize_with(root.id + 1, || None);
            grads[root.id] = Some(vec![1.0]);
            for id in (0..=root.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                if let Op::Param(pid) = self.nodes[id].op {
                    entries.push((pid, g));
                } else {
                    self.backprop_node(id, &g, &mut grads);
                }
            }
            entries.sort_by_key(|(id, _)| *id);
        }
        Grads { entries }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulates `f(buf)` into the gradient buffer of `input`,
        // allocating it on first touch; constants are skipped.
        macro_rules! into_grad {
            ($input:expr, |$buf:ident| $body:expr) => {
                if self.nodes[$input].needs_grad {
                    let len = self.nodes[$input].value.len();
                    let $buf = grads[$input].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            };
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::Add(a, b) => {
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                });
                into_grad!(*b, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                });
            }
            Op::Sub(a, b) => {
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                });
                into_grad!(*b, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o -= gv;
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                into_grad!(*a, |buf| for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                    *o += gv * y;
                });
                into_grad!(*b, |buf| for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                    *o += gv * x;
                });
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                let out = &node.value;
                into_grad!(*a, |buf| for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                    *o += gv / y;
                });
                into_grad!(*b, |buf| {
                    for (((o, &gv), &y), &q) in buf.iter_mut().zip(g).zip(bv).zip(out) {
                        *o -= gv * q / y;
                    }
                });
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                into_grad!(*a, |buf| {
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                        if x <= y {
                            *o += gv;
                        }
                    }
                });
                into_grad!(*b, |buf| {
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                        if y < x {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Max(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                into_grad!(*a, |buf| {
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                        if x >= y {
                            *o += gv;
                        }
                    }
                });
                into_grad!(*b, |buf| {
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                        if y > x {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Neg(a) => {
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o -= gv;
                });
            }
            Op::Abs(a) => {
                let av = self.val(*a);
                into_grad!(*a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gv;
                        } else if x < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                into_grad!(*a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                into_grad!(*a, |buf| {
                    for ((o, &gv), &s) in buf.iter_mut().zip(g).zip(out) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.value;
                into_grad!(*a, |buf| for ((o, &gv), &e) in buf.iter_mut().zip(g).zip(out) {
                    *o += gv * e;
                });
            }
            Op::Ln(a) => {
                let av = self.val(*a);
                into_grad!(*a, |buf| for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                    *o += gv / x;
                });
            }
            Op::Scale(a, c) => {
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += c * gv;
                });
            }
            Op::AddScalar(a) => {
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = self.nodes[*b].cols;
                let (av, bv) = (self.val(*a), self.val(*b));
                into_grad!(*a, |buf| matmul_nt_acc(buf, g, m, n, bv, k));
                into_grad!(*b, |buf| matmul_tn_acc(buf, av, m, k, g, n));
            }
            Op::Transpose(a) => {
                let (rows, cols) = (node.rows, node.cols);
                into_grad!(*a, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j * rows + i] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                });
            }
            Op::AddRowVec(a, v) => {
                let cols = node.cols;
                into_grad!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv;
                });
                into_grad!(*v, |buf| {
                    for grow in g.chunks_exact(cols) {
                        for (o, &gv) in buf.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MulRowVec(a, v) => {
                let cols = node.cols;
                let (av, vv) = (self.val(*a), self.val(*v));
                into_grad!(*a, |buf| {
                    for (orow, grow) in buf.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(vv) {
                            *o += gv * y;
                        }
                    }
                });
                into_grad!(*v, |buf| {
                    for (arow, grow) in av.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for ((o, &gv), &x) in buf.iter_mut().zip(grow).zip(arow) {
                            *o += gv * x;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                // Both cases: out = softmax over the participating entries,
                // exactly 0 elsewhere, so s∘(g − ⟨g,s⟩) is the row gradient
                // and vanishes at blocked positions on its own.
                let cols = node.cols;
                let out = &node.value;
                into_grad!(*a, |buf| {
                    for (orow, (grow, srow)) in buf
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols).zip(out.chunks_exact(cols)))
                    {
                        let dot: f64 = grow.iter().zip(srow).map(|(&gv, &s)| gv * s).sum();
                        for ((o, &gv), &s) in orow.iter_mut().zip(grow).zip(srow) {
                            *o += s * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let cols = node.cols;
                let out = &node.value;
                into_grad!(*a, |buf| {
                    for (orow, (grow, lrow)) in buf
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols).zip(out.chunks_exact(cols)))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, &gv), &l) in orow.iter_mut().zip(grow).zip(lrow) {
                            *o += gv - l.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNormRows(a) => {
                let cols = node.cols;
                let n = cols as f64;
                let av = self.val(*a);
                let out = &node.value;
                into_grad!(*a, |buf| {
                    for ((orow, arow), (grow, xrow)) in buf
                        .chunks_exact_mut(cols)
                        .zip(av.chunks_exact(cols))
                        .zip(g.chunks_exact(cols).zip(out.chunks_exact(cols)))
                    {
                        let mean = arow.iter().sum::<f64>() / n;
                        let var = arow.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gmean = grow.iter().sum::<f64>() / n;
                        let gx_mean: f64 =
                            grow.iter().zip(xrow).map(|(&gv, &x)| gv * x).sum::<f64>() / n;
                        for ((o, &gv), &x) in orow.iter_mut().zip(grow).zip(xrow) {
                            *o += inv * (gv - gmean - x * gx_mean);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                into_grad!(*a, |buf| for o in buf.iter_mut() {
                    *o += gv;
                });
            }
            Op::MeanAll(a) => {
                let gv = g[0] / self.nodes[*a].value.len() as f64;
                into_grad!(*a, |buf| for o in buf.iter_mut() {
                    *o += gv;
                });
            }
            Op::GatherRows { x, rows } => {
                let cols = node.cols;
                into_grad!(*x, |buf| {
                    for (grow, &r) in g.chunks_exact(cols).zip(rows) {
                        for (o, &gv) in buf[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::GatherCols { x, cols } => {
                let src_cols = self.nodes[*x].cols;
                into_grad!(*x, |buf| {
                    for (r, grow) in g.chunks_exact(cols.len()).enumerate() {
                        for (&c, &gv) in cols.iter().zip(grow) {
                            buf[r * src_cols + c] += gv;
                        }
                    }
                });
            }
            Op::GatherEntries { x, entries } => {
                let src_cols = self.nodes[*x].cols;
                into_grad!(*x, |buf| {
                    for (&(r, c), &gv) in entries.iter().zip(g) {
                        buf[r * src_cols + c] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    into_grad!(p, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g[offset..offset + len]) {
                            *o += gv;
                        }
                    });
                    offset += len;
                    debug_assert_eq!(len % cols, 0);
                }
            }
            Op::ConcatCols(parts) => {
                let total_cols = node.cols;
                let rows = node.rows;
                let mut offset = 0;
                for &p in parts {
                    let pcols = self.nodes[p].cols;
                    into_grad!(p, |buf| {
                        for r in 0..rows {
                            let grow = &g[r * total_cols + offset..r * total_cols + offset + pcols];
                            for (o, &gv) in buf[r * pcols..(r + 1) * pcols].iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    });
                    offset += pcols;
                }
            }
        }
    }
}

/// Checks the analytic gradient of `f` against central finite differences.
///
/// `f` must be a pure, deterministic function of `params` returning a
/// scalar. Every coordinate of every parameter in `check` is perturbed by
/// `±step`; the return value is the maximum over coordinates of
/// `|analytic − (f(x+h) − f(x−h)) / 2h| / max(1, |analytic|)`.
/// Parameters without a gradient entry count as analytic zero.
pub fn finite_diff_check<F>(params: &mut Params, check: &[ParamId], step: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &Params) -> Tensor,
{
    assert!(step > 0.0, "finite_diff_check: step must be positive");
    let eval = |params: &Params| -> f64 {
        let mut graph = Graph::new();
        let root = f(&mut graph, params);
        graph.value_scalar(root)
    };

    let mut graph = Graph::new();
    let root = f(&mut graph, params);
    let grads = graph.backward(root);

    let mut max_err = 0.0_f64;
    for &id in check {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; params.data(id).len()],
        };
        for k in 0..analytic.len() {
            let orig = params.data(id)[k];
            params.data_mut(id)[k] = orig + step;
            let up = eval(params);
            params.data_mut(id)[k] = orig - step;
            let down = eval(params);
            params.data_mut(id)[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = (analytic[k] - fd).abs() / analytic[k].abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_softmax_single_unblocked_entry() {
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![0.0, 0.0]);
        let s = g.masked_softmax_rows(x, &[0.0, BLOCKED]);
        assert_eq!(g.value(s), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_fully_blocked_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(2, 2, vec![3.0, -1.0, 5.0, 2.0]);
        let s = g.masked_softmax_rows(x, &[0.0, 0.0, BLOCKED, BLOCKED]);
        let v = g.value(s);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(&v[2..], &[0.0, 0.0]);
        let row0: f64 = v[..2].iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_unblocked_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(1, 4, vec![0.3, -2.0, 1.7, 0.0]);
        let mask = [0.0, BLOCKED, 0.0, 0.0];
        let s = g.masked_softmax_rows(x, &mask);
        let v = g.value(s);
        assert_eq!(v[1], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut g = Graph::new();
        let eye = g.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = g.constant(3, 2, vec![1.5, -2.0, 0.25, 7.0, -3.5, 0.0]);
        let y = g.matmul(eye, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::new();
        let x = g.constant(1, 3, vec![1.0, 2.0, 3.0]);
        let y = g.layer_norm_rows(x);
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps inside the sqrt shrinks it slightly
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut params = Params::new();
        let x = params.add("x", 1, 3, vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let xt = g.param(&params, x);
        let sq = g.mul(xt, xt);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_yields_empty_map() {
        let mut params = Params::new();
        let _x = params.add("x", 1, 2, vec![1.0, 2.0]);
        let mut g = Graph::new();
        let c = g.constant_scalar(5.0);
        let grads = g.backward(c);
        assert!(grads.is_empty());
    }

    #[test]
    fn frozen_params_get_no_entry() {
        let mut params = Params::new();
        let x = params.add("x", 1, 2, vec![1.0, 2.0]);
        let y = params.add("y", 1, 2, vec![3.0, 4.0]);
        params.set_requires_grad(x, false);
        let mut g = Graph::new();
        let xt = g.param(&params, x);
        let yt = g.param(&params, y);
        let s = g.add(xt, yt);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_finite_diff() {
        let mut params = Params::new();
        let x = params.add("x", 1, 2, vec![1.0, 2.0]);
        let err = finite_diff_check(&mut params, &[x], 1e-6, |g, p| {
            let xt = g.param(p, x);
            let sq = g.mul(xt, xt);
            g.sum_all(sq)
        });
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn constant_function_finite_diff_error_is_zero() {
        let mut params = Params::new();
        let x = params.add("x", 1, 2, vec![1.0, 2.0]);
        let err = finite_diff_check(&mut params, &[x], 1e-6, |g, _| g.constant_scalar(3.0));
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::new();
        let w1 = params.add_uniform("w1", 4, 5, 0.8, &mut rng);
        let b1 = params.add_uniform("b1", 1, 5, 0.8, &mut rng);
        let w2 = params.add_uniform("w2", 5, 3, 0.8, &mut rng);
        let b2 = params.add_uniform("b2", 1, 3, 0.8, &mut rng);
        let x = params.add_uniform("x", 2, 4, 2.0, &mut rng);
        let ids = [w1, b1, w2, b2, x];
        let err = finite_diff_check(&mut params, &ids, 1e-6, |g, p| {
            let xt = g.param(p, x);
            let (w1t, b1t) = (g.param(p, w1), g.param(p, b1));
            let (w2t, b2t) = (g.param(p, w2), g.param(p, b2));
            let h = g.matmul(xt, w1t);
            let h = g.add_row_vec(h, b1t);
            let h = g.relu(h);
            let o = g.matmul(h, w2t);
            let o = g.add_row_vec(o, b2t);
            let o = g.sigmoid(o);
            g.mean_all(o)
        });
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut params = Params::new();
            let w = params.add_uniform("w", 6, 6, 1.0, &mut rng);
            let x = params.add_uniform("x", 3, 6, 2.0, &mut rng);
            let mut g = Graph::new();
            let xt = g.param(&params, x);
            let wt = g.param(&params, w);
            let h = g.matmul(xt, wt);
            let h = g.layer_norm_rows(h);
            let s = g.softmax_rows(h);
            let loss = g.mean_all(s);
            let grads = g.backward(loss);
            (g.value_scalar(loss).to_bits(), grads.get(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes 2x3 and 2x2")]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]);
        let b = g.constant(2, 2, vec![0.0; 4]);
        g.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "backward: root must be a scalar")]
    fn backward_rejects_non_scalar_root() {
        let mut params = Params::new();
        let x = params.add("x", 1, 2, vec![1.0, 2.0]);
        let mut g = Graph::new();
        let xt = g.param(&params, x);
        g.backward(xt);
    }

    #[test]
    fn gather_duplicates_accumulate() {
        let mut params = Params::new();
        let x = params.add("x", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let xt = g.param(&params, x);
        let picked = g.gather_rows(xt, &[0, 0, 1]);
        let loss = g.sum_all(picked);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }
}

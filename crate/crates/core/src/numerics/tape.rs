//! Reverse-mode differentiation over dense matrices.
//!
//! Every primitive appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in exact reverse order and each adjoint writes only into the
//! gradients of its own inputs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `(1 + tanh(u)) / 2 = sigmoid(2u)` with `u = c (x + 0.044715 x^3)`.
#[inline]
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Values are shared with tapes by reference count,
/// so registering a parameter on a tape does not copy it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Zero tensors with the shape of every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var, Vec<f64>),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    BroadcastAdd(Var, Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
        probs: Vec<Tensor>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    KlRows {
        p: Var,
        q: Var,
        mask: Vec<bool>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        gold: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitives for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
/// `sum_{i: mask[i]} sum_j p_ij ln(p_ij / q_ij)` with `0 ln 0 = 0`.
pub fn kl_multinomial_rows(p: &Tensor, q: &Tensor, mask: &[bool]) -> Result<f64> {
    if p.shape() != q.shape() || mask.len() != p.rows() {
        return Err(shape_err("kl_rows", p, q));
    }
    let mut total = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in 0..p.cols() {
            let (pij, qij) = (p.get(i, j), q.get(i, j));
            if qij <= 0.0 {
                return Err(Error::NonPositiveTarget { row: i, col: j });
            }
            if pij > 0.0 {
                total += pij * (pij / qij).ln();
            }
        }
    }
    Ok(total)
}

/// Query rows that attend to a contiguous block of key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: std::ops::Range<usize>,
    pub keys: std::ops::Range<usize>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter registered on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    /// Adds the parameter gradients into `acc`, indexed by [`ParamId`].
    pub fn accumulate_into(&self, acc: &mut [Tensor]) {
        for (id, g) in self.params() {
            acc[id.0].add_assign(g);
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(
        op,
        format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter once per tape and returns its variable.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push_arc(Arc::clone(&params.values[id.0]), Op::Param(id), true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, out.data_mut());
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, av.data(), false, bv.data(), true, 0.0, out.data_mut());
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let g = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let g = self.ng(a);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let g = self.ng(a);
        self.push(out, Op::Sigmoid(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let g = self.ng(a);
        self.push(out, Op::Relu(a), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let gate: Vec<f64> = xv.data().iter().map(|&x| gelu_gate(x)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), xv.data().iter().zip(&gate).map(|(x, s)| x * s).collect())
            .expect("same shape");
        let g = self.ng(a);
        self.push(out, Op::Gelu(a, gate), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transposed();
        let g = self.ng(a);
        self.push(out, Op::Transpose(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(rows, cols, data)?;
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", av.rows()),
            ));
        }
        let cols = av.cols();
        let out = Tensor::from_vec(end - start, cols, av.data()[start * cols..end * cols].to_vec())?;
        let g = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), g))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {} cols", av.cols()),
            ));
        }
        let out = Tensor::from_fn(av.rows(), end - start, |i, j| av.get(i, start + j));
        let g = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), g))
    }

    /// Column-wise mean, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let m = av.rows() as f64;
        let out = Tensor::from_fn(1, av.cols(), |_, j| {
            (0..av.rows()).map(|i| av.get(i, j)).sum::<f64>() / m
        });
        let g = self.ng(a);
        Ok(self.push(out, Op::MeanRows(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let g = self.ng(a);
        self.push(out, Op::Sum(a), g)
    }

    /// `out[i][j] = col[i] + row[j]` for an `m x 1` column and `1 x n` row.
    pub fn broadcast_add(&mut self, col: Var, row: Var) -> Result<Var> {
        let (cv, rv) = (self.value(col), self.value(row));
        if cv.cols() != 1 || rv.rows() != 1 {
            return Err(shape_err("broadcast_add", cv, rv));
        }
        let out = Tensor::from_fn(cv.rows(), rv.cols(), |i, j| cv.get(i, 0) + rv.get(0, j));
        let g = self.ng(col) || self.ng(row);
        Ok(self.push(out, Op::BroadcastAdd(col, row), g))
    }

    /// Row-wise softmax. With `allowed`, entries marked `false` are excluded
    /// and come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        if let Some(mask) = allowed {
            if mask.len() != m * n {
                return Err(Error::shape("softmax_rows", "mask size"));
            }
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let keep = |j: usize| allowed.is_none_or(|mk| mk[i * n + j]);
            let row = xv.row(i);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMaskedRow(i));
            }
            let o = out.row_mut(i);
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let g = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), g))
    }

    /// Scaled dot-product attention of already projected queries `q` (m x d)
    /// over keys `k` and values `v` (n x d), split into `heads` column blocks.
    /// Each group's query rows see only its key rows; rows outside every
    /// group are zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: &[AttnGroup]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d) = qv.shape();
        let n = kv.rows();
        if kv.cols() != d || vv.shape() != (n, d) {
            return Err(shape_err("attention", qv, kv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let mut covered = vec![false; m];
        for g in groups {
            if g.keys.is_empty() || g.keys.end > n || g.queries.end > m {
                return Err(Error::shape("attention", format!("group {g:?} outside {m}x{n}")));
            }
            for i in g.queries.clone() {
                if std::mem::replace(&mut covered[i], true) {
                    return Err(Error::shape("attention", format!("query row {i} in two groups")));
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(m, d);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in groups {
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let mut p = Tensor::zeros(g.queries.len(), g.keys.len());
                for (a, i) in g.queries.clone().enumerate() {
                    let qi = &qv.row(i)[c.clone()];
                    let pr = p.row_mut(a);
                    for (b, j) in g.keys.clone().enumerate() {
                        pr[b] = scale * qi.iter().zip(&kv.row(j)[c.clone()]).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let max = pr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in pr.iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in pr.iter_mut() {
                        *x /= z;
                    }
                    let o = &mut out.row_mut(i)[c.clone()];
                    for (b, j) in g.keys.clone().enumerate() {
                        for (ov, vj) in o.iter_mut().zip(&vv.row(j)[c.clone()]) {
                            *ov += pr[b] * vj;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups: groups.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Every row-stochastic matrix recorded so far: softmax outputs and the
    /// weights of each attention node.
    pub fn stochastic_matrices(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Softmax(_) => out.push(&*n.value),
                Op::Attention { probs, .. } => out.extend(probs.iter()),
                _ => {}
            }
        }
        out
    }

    /// Attention weights of an [`Tape::attention`] node, one matrix per
    /// (group, head), group-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map; `1e-5` is added to the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = xv.shape();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = Tensor::zeros(m, d);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Tensor::zeros(m, d);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = gv.data()[j] * xh[j] + bv.data()[j];
            }
        }
        let g = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Selects table rows; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= tv.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: id,
                        limit: tv.rows(),
                    });
                }
                out.row_mut(r).copy_from_slice(tv.row(id));
            }
        }
        let g = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// [`kl_multinomial_rows`] as a tape operation.
    pub fn kl_rows(&mut self, p: Var, q: Var, mask: &[bool]) -> Result<Var> {
        let total = kl_multinomial_rows(self.value(p), self.value(q), mask)?;
        let g = self.ng(p) || self.ng(q);
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlRows {
                p,
                q,
                mask: mask.to_vec(),
            },
            g,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce_with_logits", "label count"));
        }
        let k = labels.len() as f64;
        let loss = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / k;
        let g = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            g,
        ))
    }

    /// `-ln softmax(logits)[gold]` over a `1 x k` row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lv = self.value(logits);
        if gold >= lv.len() {
            return Err(Error::IndexOutOfRange {
                index: gold,
                limit: lv.len(),
            });
        }
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|z| (z - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv.data()[gold] - max - z.ln());
        let g = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                gold,
            },
            g,
        ))
    }

    /// Propagates `d loss / d node` to every node that needs a gradient.
    /// A tape supports exactly one backward pass until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.adjoint(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.nodes[v.0].value.shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn adjoint(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let ga = self.buf(grads, *a);
                    gemm(m, n, k, g.data(), false, bv.data(), true, 1.0, ga.data_mut());
                }
                if self.ng(*b) {
                    let gb = self.buf(grads, *b);
                    gemm(k, m, n, av.data(), true, g.data(), false, 1.0, gb.data_mut());
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.ng(*a) {
                    let ga = self.buf(grads, *a);
                    gemm(m, n, k, g.data(), false, bv.data(), false, 1.0, ga.data_mut());
                }
                if self.ng(*b) {
                    let gb = self.buf(grads, *b);
                    gemm(n, m, k, g.data(), true, av.data(), false, 1.0, gb.data_mut());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        self.buf(grads, v).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    self.buf(grads, *a).add_assign(g);
                }
                if self.ng(*row) {
                    let gr = self.buf(grads, *row);
                    for r in 0..g.rows() {
                        for (acc, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = self.buf(grads, *a);
                    for ((acc, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *acc += gv * y;
                    }
                }
                if self.ng(*b) {
                    let gb = self.buf(grads, *b);
                    for ((acc, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *acc += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = self.buf(grads, *a);
                for (acc, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                    *acc += c * gv;
                }
            }
            Op::Sigmoid(a) => {
                let ga = self.buf(grads, *a);
                for ((acc, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *acc += gv * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let ga = self.buf(grads, *a);
                for ((acc, gv), x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if *x > 0.0 {
                        *acc += gv;
                    }
                }
            }
            Op::Gelu(a, gate) => {
                let xv = self.value(*a);
                let ga = self.buf(grads, *a);
                for (((acc, gv), &x), &s) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()).zip(gate) {
                    let d = s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *acc += gv * d;
                }
            }
            Op::Transpose(a) => {
                self.buf(grads, *a).add_assign(&g.transposed());
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let gp = self.buf(grads, p);
                        for r in 0..g.rows() {
                            for (acc, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *acc += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let gp = self.buf(grads, p);
                        for (acc, v) in gp.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                            *acc += v;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = g.cols();
                let ga = self.buf(grads, *a);
                let dst = &mut ga.data_mut()[start * cols..start * cols + g.len()];
                for (acc, v) in dst.iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
            Op::SliceCols(a, start) => {
                let ga = self.buf(grads, *a);
                for r in 0..g.rows() {
                    let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                    for (acc, v) in dst.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
            Op::MeanRows(a) => {
                let ga = self.buf(grads, *a);
                let m = ga.rows() as f64;
                for r in 0..ga.rows() {
                    for (acc, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *acc += v / m;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                for acc in self.buf(grads, *a).data_mut() {
                    *acc += s;
                }
            }
            Op::BroadcastAdd(col, row) => {
                if self.ng(*col) {
                    let gc = self.buf(grads, *col);
                    for r in 0..g.rows() {
                        gc.data_mut()[r] += g.row(r).iter().sum::<f64>();
                    }
                }
                if self.ng(*row) {
                    let gr = self.buf(grads, *row);
                    for r in 0..g.rows() {
                        for (acc, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let gx = self.buf(grads, *x);
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((acc, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *acc += yv * (gv - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, d) = qv.shape();
                let n = kv.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(m, d);
                let mut gk = Tensor::zeros(n, d);
                let mut gv = Tensor::zeros(n, d);
                let mut ds = Vec::new();
                for (gi, grp) in groups.iter().enumerate() {
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[gi * heads + h];
                        for (a, i) in grp.queries.clone().enumerate() {
                            let pr = p.row(a);
                            let go = &g.row(i)[c.clone()];
                            ds.clear();
                            for (b, j) in grp.keys.clone().enumerate() {
                                ds.push(go.iter().zip(&vv.row(j)[c.clone()]).map(|(x, y)| x * y).sum::<f64>());
                                for (acc, gov) in gv.row_mut(j)[c.clone()].iter_mut().zip(go) {
                                    *acc += pr[b] * gov;
                                }
                            }
                            let dot: f64 = pr.iter().zip(&ds).map(|(x, y)| x * y).sum();
                            for (b, j) in grp.keys.clone().enumerate() {
                                let s = scale * pr[b] * (ds[b] - dot);
                                for (acc, kj) in gq.row_mut(i)[c.clone()].iter_mut().zip(&kv.row(j)[c.clone()]) {
                                    *acc += s * kj;
                                }
                                for (acc, qi) in gk.row_mut(j)[c.clone()].iter_mut().zip(&qv.row(i)[c.clone()]) {
                                    *acc += s * qi;
                                }
                            }
                        }
                    }
                }
                for (var, t) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.ng(var) {
                        self.buf(grads, var).add_assign(&t);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data().to_vec();
                let d = g.cols();
                if self.ng(*gain) {
                    let gg = self.buf(grads, *gain);
                    for r in 0..g.rows() {
                        for j in 0..d {
                            gg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = self.buf(grads, *bias);
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
                if self.ng(*x) {
                    let gx = self.buf(grads, *x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows() {
                        let xh = xhat.row(r);
                        for j in 0..d {
                            dxhat[j] = g.get(r, j) * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, acc) in gx.row_mut(r).iter_mut().enumerate() {
                            *acc += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let gt = self.buf(grads, *table);
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        for (acc, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::KlRows { p, q, mask } => {
                let s = g.item();
                let (pv, qv) = (self.value(*p), self.value(*q));
                let rows: Vec<usize> = (0..mask.len()).filter(|&r| mask[r]).collect();
                if self.ng(*p) {
                    let gp = self.buf(grads, *p);
                    for &r in &rows {
                        for j in 0..pv.cols() {
                            let pij = pv.get(r, j);
                            if pij > 0.0 {
                                gp.data_mut()[r * pv.cols() + j] += s * ((pij / qv.get(r, j)).ln() + 1.0);
                            }
                        }
                    }
                }
                if self.ng(*q) {
                    let gq = self.buf(grads, *q);
                    for &r in &rows {
                        for j in 0..qv.cols() {
                            gq.data_mut()[r * qv.cols() + j] -= s * pv.get(r, j) / qv.get(r, j);
                        }
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                let s = g.item() / labels.len() as f64;
                let lv = self.value(*logits);
                let gl = self.buf(grads, *logits);
                for ((acc, &z), &y) in gl.data_mut().iter_mut().zip(lv.data()).zip(labels) {
                    *acc += s * (sigmoid(z) - y);
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                gold,
            } => {
                let s = g.item();
                let gl = self.buf(grads, *logits);
                for (j, (acc, p)) in gl.data_mut().iter_mut().zip(probs).enumerate() {
                    let y = if j == *gold { 1.0 } else { 0.0 };
                    *acc += s * (p - y);
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

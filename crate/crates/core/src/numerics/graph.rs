use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{default_precision, dot, gemm_nn, gemm_nt, gemm_tn, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operations.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param { tag: u64, id: ParamId },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add { a: Var, b: Var, row_bcast: bool },
    Mul { a: Var, b: Var, row_bcast: bool },
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Rc<[usize]> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    MaskedFill { x: Var, mask: Rc<[bool]> },
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Vec<f64> },
    Sum(Var),
    GumbelPerturb(Var),
    StraightThrough(Var),
    Attention { q: Var, k: Var, v: Var, keys: Rc<KeySets>, heads: usize, scale: f64, probs: Vec<f64> },
}

/// For every query row, the key rows it may attend to (compressed rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySets {
    offsets: Vec<usize>,
    idx: Vec<usize>,
    num_keys: usize,
}

impl KeySets {
    /// Builds the sets from a predicate `allowed(query, key)`.
    pub fn from_fn(num_queries: usize, num_keys: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut offsets = Vec::with_capacity(num_queries + 1);
        let mut idx = Vec::new();
        offsets.push(0);
        for q in 0..num_queries {
            idx.extend((0..num_keys).filter(|&k| allowed(q, k)));
            offsets.push(idx.len());
        }
        KeySets { offsets, idx, num_keys }
    }

    /// One contiguous key range `[start, end)` per query.
    pub fn from_ranges(ranges: impl IntoIterator<Item = (usize, usize)>, num_keys: usize) -> Self {
        let mut offsets = vec![0];
        let mut idx = Vec::new();
        for (a, b) in ranges {
            idx.extend(a..b);
            offsets.push(idx.len());
        }
        KeySets { offsets, idx, num_keys }
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    pub fn keys(&self, q: usize) -> &[usize] {
        &self.idx[self.offsets[q]..self.offsets[q + 1]]
    }

    /// Total number of allowed pairs.
    pub fn nnz(&self) -> usize {
        self.idx.len()
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order; `backward`
/// walks them in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
    param_cache: HashMap<(u64, ParamId), Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            precision: default_precision(),
            grad_enabled: true,
            param_cache: HashMap::new(),
        }
    }

    /// A graph that never records gradient requirements; used for inference.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Copies the current value of `v` into a fresh leaf; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Brings a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param { tag: key.0, id }, p.requires_grad());
        self.param_cache.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), ng))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch { op, left: self.shape(a).to_vec(), right: self.shape(b).to_vec() }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(false);
        }
        let (_, ca) = ta.dims2();
        let (rb, cb) = tb.dims2();
        if rb == 1 && cb == ca && tb.shape().len() <= 2 {
            return Ok(true);
        }
        Err(self.mismatch(op, a, b))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let row_bcast = self.broadcast_kind("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols().max(1);
        let data: Vec<f64> = if row_bcast {
            ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        };
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b, row_bcast }, ng))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let row_bcast = self.broadcast_kind("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols().max(1);
        let data: Vec<f64> = if row_bcast {
            ta.data().iter().enumerate().map(|(i, x)| x * tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()
        };
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b, row_bcast }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Row-wise softmax over the last axis. A row that is entirely `-inf`
    /// yields all zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = ta.data().to_vec();
        for i in 0..r {
            softmax_row(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = ta.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Selects rows of `table` (embedding lookup when `table` is a weight matrix).
    pub fn gather(&mut self, table: Var, ids: impl Into<Rc<[usize]>>) -> Result<Var> {
        let ids: Rc<[usize]> = ids.into();
        let tt = self.value(table);
        let (r, c) = tt.dims2();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids.iter() {
            if i >= r {
                return Err(Error::Shape(format!("gather row {i} out of range for {:?}", tt.shape())));
            }
            out.extend_from_slice(tt.row_slice(i));
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        let ng = self.ng(table);
        Ok(self.push(t, Op::Gather { table, ids }, ng))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let t = match axis {
            0 => {
                let c = dims[0].1;
                let mut out = Vec::new();
                for (k, &p) in parts.iter().enumerate() {
                    if dims[k].1 != c {
                        return Err(self.mismatch("concat", parts[0], p));
                    }
                    out.extend_from_slice(self.value(p).data());
                }
                let rows = dims.iter().map(|d| d.0).sum();
                Tensor::matrix(rows, c, out)?
            }
            1 => {
                let r = dims[0].0;
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut out = vec![0.0; r * total];
                let mut off = 0;
                for (k, &p) in parts.iter().enumerate() {
                    let (pr, pc) = dims[k];
                    if pr != r {
                        return Err(self.mismatch("concat", parts[0], p));
                    }
                    let src = self.value(p).data();
                    for i in 0..r {
                        out[i * total + off..i * total + off + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
                    }
                    off += pc;
                }
                Tensor::matrix(r, total, out)?
            }
            _ => return Err(Error::Shape(format!("concat axis {axis} unsupported"))),
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}..{} of {c} columns", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::matrix(r, len, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: impl Into<Rc<[bool]>>, value: f64) -> Result<Var> {
        let mask: Rc<[bool]> = mask.into();
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::Shape(format!("mask of {} entries for {:?}", mask.len(), tx.shape())));
        }
        let data = tx.data().iter().zip(mask.iter()).map(|(&v, &m)| if m { value } else { v }).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaskedFill { x, mask }, ng))
    }

    /// Per-row negative log-likelihood of `targets` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: impl Into<Rc<[usize]>>) -> Result<Var> {
        let targets: Rc<[usize]> = targets.into();
        let tl = self.value(logits);
        let (r, c) = tl.dims2();
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let t = targets[i];
            if t >= c {
                return Err(Error::Shape(format!("target {t} out of range for {c} classes")));
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            out.push(lse - row[t]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::new(vec![r], out)?, Op::CrossEntropy { logits, targets, probs }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Adds a frozen noise sample (same shape as `a`).
    pub fn gumbel_perturb(&mut self, a: Var, noise: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if noise.len() != ta.len() {
            return Err(Error::Shape(format!("noise of {} entries for {:?}", noise.len(), ta.shape())));
        }
        let data = ta.data().iter().zip(noise).map(|(x, g)| x + g).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::GumbelPerturb(a), ng))
    }

    /// Forward: one-hot of each row's argmax. Backward: identity into `relaxed`.
    pub fn straight_through(&mut self, relaxed: Var) -> Var {
        let tr = self.value(relaxed);
        let (r, c) = tr.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let j = argmax(tr.row_slice(i));
            out[i * c + j] = 1.0;
        }
        let t = Tensor::new(tr.shape().to_vec(), out).unwrap();
        let ng = self.ng(relaxed);
        self.push(t, Op::StraightThrough(relaxed), ng)
    }

    /// Multi-head scaled dot-product attention restricted to `keys`.
    /// `q` is `nq x d`, `k` and `v` are `nk x d`; heads split the columns.
    /// A query with no allowed key gets a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, keys: Rc<KeySets>, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.dims2();
        let (nk, dk) = tk.dims2();
        if dk != d || tv.dims2() != (nk, d) || keys.num_queries() != nq || keys.num_keys() != nk {
            return Err(Error::ShapeMismatch { op: "attention", left: tq.shape().to_vec(), right: tk.shape().to_vec() });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; keys.nnz() * heads];
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            let ks = keys.keys(i);
            let base = keys.offsets[i] * heads;
            for h in 0..heads {
                let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                let p = &mut probs[base + h * ks.len()..base + (h + 1) * ks.len()];
                for (pj, &j) in p.iter_mut().zip(ks) {
                    *pj = scale * dot(qi, &kd[j * d + h * dh..j * d + (h + 1) * dh]);
                }
                softmax_row(p);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&pj, &j) in p.iter().zip(ks) {
                    let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (x, y) in o.iter_mut().zip(vj) {
                        *x += pj * y;
                    }
                }
            }
        }
        let t = Tensor::matrix(nq, d, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(t, Op::Attention { q, k, v, keys, heads, scale, probs }, ng))
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        out.sort_by_key(|(t, id, _)| (*t, *id));
        Ok(Gradients::new(out))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Vec<(u64, ParamId, Vec<f64>)>,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param { tag, id } => out.push((*tag, *id, g)),
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.cols();
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                // dA = G * B^T, dB = A^T * G
                acc(*a, &mut |ga| gemm_nt(&g, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(av, &g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.rows();
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                // C = A B^T: dA = G B, dB = G^T A
                acc(*a, &mut |ga| gemm_nn(&g, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(&g, av, gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add { a, b, row_bcast } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                if *row_bcast {
                    let c = nodes[b.0].value.len();
                    acc(*b, &mut |gb| {
                        for (i, y) in g.iter().enumerate() {
                            gb[i % c] += y;
                        }
                    });
                } else {
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul { a, b, row_bcast } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if *row_bcast {
                    let c = bv.len();
                    acc(*a, &mut |ga| {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * bv[i % c];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, y) in g.iter().enumerate() {
                            gb[i % c] += y * av[i];
                        }
                    });
                } else {
                    acc(*a, &mut |ga| {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * bv[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, x) in gb.iter_mut().enumerate() {
                            *x += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y)),
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = dot(gr, yr) / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                acc(*table, &mut |gt| {
                    for (k, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        acc(p, &mut |gp| gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y));
                        off += n;
                    }
                } else {
                    let total = node.value.cols();
                    let r = node.value.rows();
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p.0].value.cols();
                        acc(p, &mut |gp| {
                            for i in 0..r {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * total + off + j];
                                }
                            }
                        });
                        off += pc;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.cols();
                let len = node.value.cols();
                let r = node.value.rows();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::MaskedFill { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    if !mask[i] {
                        gx[i] += g[i];
                    }
                }
            }),
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].value.cols();
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[r] * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Attention { q, k, v, keys, heads, scale, probs } => {
                let (nq, d) = nodes[q.0].value.dims2();
                let nk = nodes[k.0].value.rows();
                let dh = d / heads;
                let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * d];
                let mut ds = Vec::new();
                for i in 0..nq {
                    let ks = keys.keys(i);
                    let base = keys.offsets[i] * heads;
                    for h in 0..*heads {
                        let p = &probs[base + h * ks.len()..base + (h + 1) * ks.len()];
                        let gi = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        ds.clear();
                        let mut s = 0.0;
                        for (&pj, &j) in p.iter().zip(ks) {
                            let dp = dot(gi, &vd[j * d + h * dh..j * d + (h + 1) * dh]);
                            ds.push(dp);
                            s += pj * dp;
                            for (x, y) in gv[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(gi) {
                                *x += pj * y;
                            }
                        }
                        let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                        for ((&pj, &j), dsj) in p.iter().zip(ks).zip(ds.iter_mut()) {
                            *dsj = scale * pj * (*dsj - s);
                            let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                            for (x, y) in gq[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().zip(kj) {
                                *x += *dsj * y;
                            }
                            for (x, y) in gk[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(qi) {
                                *x += *dsj * y;
                            }
                        }
                    }
                }
                for (var, src) in [(*q, &gq), (*k, &gk), (*v, &gv)] {
                    acc(var, &mut |dst| dst.iter_mut().zip(src).for_each(|(x, y)| *x += y));
                }
            }
            Op::GumbelPerturb(a) | Op::StraightThrough(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y))
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::PrecisionGuard;

    fn store_with(name: &str, shape: Vec<usize>, data: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, Tensor::new(shape, data).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn sum_of_squares() {
        let (s, id) = store_with("w", vec![2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let sq = g.mul(w, w).unwrap();
        let f = g.sum(sq);
        assert_eq!(g.value(f).item(), 5.0);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(&s, id).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_pick_max_symmetric_jacobian() {
        let (s, id) = store_with("w", vec![1, 2], vec![0.0, 0.0]);
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let p = g.softmax(w);
        let pt = g.transpose(p).unwrap();
        // ties pick the first index
        let picked = g.gather(pt, vec![argmax(g.value(p).data())]).unwrap();
        let f = g.sum(picked);
        assert_eq!(g.value(f).item(), 0.5);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(&s, id).unwrap(), &[0.25, -0.25]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let (s, id) = store_with("w", vec![2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(&s, id);
        assert!(matches!(g.backward(w), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut s = ParamStore::new();
        let a = s.add_const("a", vec![2], 1.0).unwrap();
        let b = s.add_const("b", vec![2], 1.0).unwrap();
        let mut g = Graph::new();
        let va = g.param(&s, a);
        let _vb = g.param(&s, b);
        let f = g.sum(va);
        let grads = g.backward(f).unwrap();
        let named = grads.named(&s);
        assert_eq!(named["b"].data(), &[0.0, 0.0]);
        assert_eq!(named["a"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_rows_vanish() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]).unwrap());
        let m = g.masked_fill(x, vec![false, false, false, true, true, true], f64::NEG_INFINITY).unwrap();
        let p = g.softmax(m);
        let row0: f64 = g.value(p).row_slice(0).iter().sum();
        assert!((row0 - 1.0).abs() < 1e-6);
        assert!(g.value(p).row_slice(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let _p = PrecisionGuard::new(Precision::F32);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.1]));
        assert_eq!(g.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let (s, id) = store_with("w", vec![2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.3, 0.2]);
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let h = g.straight_through(w);
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let f = g.sum(h);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(&s, id).unwrap(), &[1.0; 6]);
    }

    fn attention_fixture() -> (ParamStore, [ParamId; 3], Rc<KeySets>) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let q = s.add_normal("q", vec![5, 4], 1.0, &mut rng).unwrap();
        let k = s.add_normal("k", vec![6, 4], 1.0, &mut rng).unwrap();
        let v = s.add_normal("v", vec![6, 4], 1.0, &mut rng).unwrap();
        let keys = KeySets::from_fn(5, 6, |i, j| (i + j) % 3 != 0 || j == i);
        (s, [q, k, v], Rc::new(keys))
    }

    #[test]
    fn sparse_attention_matches_masked_dense_attention() {
        let _p = PrecisionGuard::new(Precision::F64);
        let (s, [q, k, v], keys) = attention_fixture();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.param(&s, q), g.param(&s, k), g.param(&s, v));
        let fused = g.attention(qv, kv, vv, keys.clone(), 2).unwrap();
        let blocked: Vec<bool> = (0..5).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| !keys.keys(i).contains(&j)).collect();
        let mut outs = Vec::new();
        for h in 0..2 {
            let (qh, kh, vh) = (g.slice_cols(qv, 2 * h, 2).unwrap(), g.slice_cols(kv, 2 * h, 2).unwrap(), g.slice_cols(vv, 2 * h, 2).unwrap());
            let sc = g.matmul_nt(qh, kh).unwrap();
            let sc = g.scale(sc, 1.0 / 2f64.sqrt());
            let sc = g.masked_fill(sc, blocked.clone(), f64::NEG_INFINITY).unwrap();
            let p = g.softmax(sc);
            outs.push(g.matmul(p, vh).unwrap());
        }
        let dense = g.concat(&outs, 1).unwrap();
        for (a, b) in g.value(fused).data().iter().zip(g.value(dense).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_attention_gradient_matches_finite_differences() {
        let _p = PrecisionGuard::new(Precision::F64);
        let (mut s, [q, k, v], keys) = attention_fixture();
        s.set_precision(Precision::F64);
        let w = Tensor::matrix(5, 4, (0..20).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()).unwrap();
        let err = crate::numerics::finite_difference_check(
            &mut s,
            |ps, g| {
                let (qv, kv, vv) = (g.param(ps, q), g.param(ps, k), g.param(ps, v));
                let a = g.attention(qv, kv, vv, keys.clone(), 2)?;
                let wc = g.constant(w.clone());
                let m = g.mul(a, wc)?;
                Ok(g.sum(m))
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is applied. Values are computed
//! eagerly; [`Tape::backward`] replays the records in reverse order and
//! applies each primitive's adjoint. Because records are appended in
//! evaluation order, every input of a record precedes it and the reverse walk
//! is a valid topological order.
//!
//! Parameters are borrowed from a [`ParamStore`] and registered at most once
//! per tape, so the gradient of a parameter used in several places is the sum
//! of its uses.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix stored as per-row `(column, weight)` lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Log(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    SelectRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SparseMatMul(Arc<SparseRows>, Var),
    SoftMask {
        x: Var,
        token: Var,
        mask: Vec<bool>,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Gradients of the parameters used on a tape, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Drops every gradient whose parameter fails the predicate.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.iter().map(|(_, g)| g.norm_sq()).sum())
    }
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; inputs come from [`Tape::leaf`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter of the borrowed store (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.rows(), t.cols()))
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.shape2(a, "transpose")?;
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape2(a, op)?;
        let (br, bc) = self.shape2(b, op)?;
        let dim = |x: usize, y: usize| {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        match (dim(ar, br), dim(ac, bc)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            }),
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (r, c) = self.broadcast(a, b, op)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ta.rows() == 1 { 0 } else { i };
            let ib = if tb.rows() == 1 { 0 } else { i };
            for j in 0..c {
                let ja = if ta.cols() == 1 { 0 } else { j };
                let jb = if tb.cols() == 1 { 0 } else { j };
                out.push(f(ta.get(ia, ja), tb.get(ib, jb)));
            }
        }
        Ok(Tensor::matrix(r, c, out))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_broadcast(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_broadcast(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product with row/column/scalar broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_broadcast(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| libm::pow(x, p));
        let rg = self.rg(a);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::log);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// Gaussian error linear unit, exact erf form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Max-subtracted softmax along the last axis (each row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.shape2(a, "softmax")?;
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape2(a, "log_softmax")?;
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
            out.extend(row.iter().map(|&v| v - lse));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(a), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 x d` affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape2(x, "layer_norm")?;
        if eps <= 0.0 {
            return Err(contract("layer_norm eps must be positive"));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, c] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            inv_std.push(s);
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: Tensor::matrix(r, c, xhat),
            inv_std,
        };
        Ok(self.push(Tensor::matrix(r, c, out), op, rg))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `N x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape2(a, "mean_rows")?;
        let x = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(1, c, out), Op::MeanRows(a), rg))
    }

    /// Row sums: `N x d -> N x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape2(a, "sum_cols")?;
        let x = self.value(a);
        let out = (0..r).map(|i| x.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, 1, out), Op::SumCols(a), rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape2(a, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let value = self.value(a).select_rows(rows);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), rg))
    }

    /// Places row `k` of `a` at row `rows[k]` of an `n x d` zero matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let (r, c) = self.shape2(a, "scatter_rows")?;
        if r != rows.len() || rows.iter().any(|&i| i >= n) {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: vec![r, c],
                rhs: vec![rows.len(), n],
            });
        }
        let mut out = Tensor::zeros(&[n, c]);
        let x = self.value(a);
        for (k, &i) in rows.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScatterRows(a, rows.to_vec()), rg))
    }

    /// Picks entry `cols[i]` from each row `i`: `N x d -> N x 1`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape2(a, "pick_per_row")?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "pick_per_row",
                lhs: vec![r, c],
                rhs: vec![cols.len()],
            });
        }
        let x = self.value(a);
        let out = cols.iter().enumerate().map(|(i, &j)| x.get(i, j)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, 1, out), Op::PickPerRow(a, cols.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_cols needs at least one part"));
        }
        let r = self.shape2(parts[0], "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r, total],
                    rhs: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_rows needs at least one part"));
        }
        let c = self.shape2(parts[0], "concat_rows")?.1;
        let mut out = Vec::new();
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![total, c],
                    rhs: vec![pr, pc],
                });
            }
            out.extend_from_slice(self.value(p).data());
            total += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(total, c, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, end],
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, end - start, out), Op::SliceCols(a, start), rg))
    }

    /// Constant sparse matrix times a dense variable.
    pub fn sparse_matmul(&mut self, s: &Arc<SparseRows>, a: Var) -> Result<Var> {
        let (r, c) = self.shape2(a, "sparse_matmul")?;
        if s.n_cols != r {
            return Err(Error::Shape {
                op: "sparse_matmul",
                lhs: vec![s.n_rows(), s.n_cols],
                rhs: vec![r, c],
            });
        }
        let x = self.value(a);
        let mut out = Tensor::zeros(&[s.n_rows(), c]);
        for (i, entries) in s.rows.iter().enumerate() {
            let row = out.row_mut(i);
            for &(j, w) in entries {
                for (o, v) in row.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SparseMatMul(Arc::clone(s), a), rg))
    }

    /// Interpolates masked rows toward a `1 x d` token:
    /// `(1 - beta) * x_i + beta * token` where `mask[i]`, `x_i` elsewhere.
    pub fn soft_mask(&mut self, x: Var, token: Var, mask: &[bool], beta: f64) -> Result<Var> {
        let (r, c) = self.shape2(x, "soft_mask")?;
        if self.value(token).shape() != [1, c] {
            return Err(Error::Shape {
                op: "soft_mask",
                lhs: vec![r, c],
                rhs: self.value(token).shape().to_vec(),
            });
        }
        if mask.len() != r {
            return Err(contract(alloc::format!(
                "soft_mask: mask length {} for {} rows",
                mask.len(),
                r
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(contract("soft_mask: beta must lie in [0, 1]"));
        }
        let mut out = self.value(x).clone();
        let e = self.value(token).data().to_vec();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, t) in out.row_mut(i).iter_mut().zip(&e) {
                *o = (1.0 - beta) * *o + beta * t;
            }
        }
        let rg = self.rg(x) || self.rg(token);
        let op = Op::SoftMask {
            x,
            token,
            mask: mask.to_vec(),
            beta,
        };
        Ok(self.push(out, op, rg))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    ///
    /// Every recorded value that requires a gradient receives one (zeros when
    /// `loss` does not depend on it). Calling this again adds to the stored
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if !node.requires_grad {
                continue;
            }
            let a = a.unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match &mut node.grad {
                Some(existing) => existing.add_assign(&a),
                None => node.grad = Some(a),
            }
        }
        Ok(())
    }

    /// Collects the gradients of every parameter registered on this tape.
    pub fn param_grads(&self) -> ParamGrads {
        let grads = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| self.nodes[v.0].grad.clone()))
            .collect();
        ParamGrads { grads }
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to the shape of `v`.
    fn unbroadcast(&self, v: Var, g: &Tensor) -> Tensor {
        let target = self.value(v);
        let (tr, tc) = (target.rows(), target.cols());
        if tr == g.rows() && tc == g.cols() {
            return g.clone();
        }
        let mut out = Tensor::zeros(&[tr, tc]);
        for i in 0..g.rows() {
            let oi = if tr == 1 { 0 } else { i };
            for j in 0..g.cols() {
                let oj = if tc == 1 { 0 } else { j };
                let cur = out.get(oi, oj);
                out.set(oi, oj, cur + g.get(i, j));
            }
        }
        out
    }

    /// Value of `v` read at the broadcast position `(i, j)`.
    fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
        let ii = if t.rows() == 1 { 0 } else { i };
        let jj = if t.cols() == 1 { 0 } else { j };
        t.get(ii, jj)
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let ga = g.matmul(&self.value(b).transpose()).expect("matmul adjoint");
                    self.accumulate(adj, a, ga);
                }
                if self.rg(b) {
                    let gb = self.value(a).transpose().matmul(g).expect("matmul adjoint");
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.accumulate(adj, a, self.unbroadcast(a, g));
                }
                if self.rg(b) {
                    self.accumulate(adj, b, self.unbroadcast(b, g));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.accumulate(adj, a, self.unbroadcast(a, g));
                }
                if self.rg(b) {
                    let mut gb = self.unbroadcast(b, g);
                    gb.scale_in_place(-1.0);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                for (x, other) in [(a, tb), (b, ta)] {
                    if !self.rg(x) {
                        continue;
                    }
                    let mut full = g.clone();
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            full.set(r, c, g.get(r, c) * Self::bget(other, r, c));
                        }
                    }
                    self.accumulate(adj, x, self.unbroadcast(x, &full));
                }
            }
            Op::Scale(a, f) => self.accumulate(adj, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::Powf(a, p) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *o *= p * libm::pow(*xv, p - 1.0);
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *o /= xv;
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *o *= gelu_grad(*xv);
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dot: f64 = y.iter().zip(g.row(r)).map(|(y, g)| y * g).sum();
                    for (o, yv) in ga.row_mut(r).iter_mut().zip(y) {
                        *o = yv * (*o - dot);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, lv) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= libm::exp(*lv) * gsum;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (xhat.rows(), xhat.cols());
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let gy = g.row(i);
                        let xh = xhat.row(i);
                        let dxh: Vec<f64> = gy.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(adj, *x, gx);
                }
                if self.rg(*gamma) {
                    let mut gg = Tensor::zeros(&[1, c]);
                    for i in 0..r {
                        for (j, o) in gg.data_mut().iter_mut().enumerate() {
                            *o += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.accumulate(adj, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gb = Tensor::zeros(&[1, c]);
                    for i in 0..r {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(adj, *beta, gb);
                }
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accumulate(adj, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let mut ga = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let gv = g.get(r, 0);
                    for o in ga.row_mut(r) {
                        *o = gv;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SelectRows(a, rows) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::ScatterRows(a, rows) => {
                let ga = g.select_rows(rows);
                self.accumulate(adj, *a, ga);
            }
            Op::PickPerRow(a, cols) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (r, &c) in cols.iter().enumerate() {
                    ga.set(r, c, g.get(r, 0));
                }
                self.accumulate(adj, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(&[g.rows(), pc]);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        self.accumulate(adj, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.rg(p) {
                        let idx: Vec<usize> = (offset..offset + pr).collect();
                        self.accumulate(adj, p, g.select_rows(&idx));
                    }
                    offset += pr;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SparseMatMul(s, a) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (r, entries) in s.rows.iter().enumerate() {
                    for &(j, w) in entries {
                        for (o, v) in ga.row_mut(j).iter_mut().zip(g.row(r)) {
                            *o += w * v;
                        }
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SoftMask {
                x,
                token,
                mask,
                beta,
            } => {
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for o in gx.row_mut(r) {
                            *o *= 1.0 - beta;
                        }
                    }
                    self.accumulate(adj, *x, gx);
                }
                if self.rg(*token) {
                    let mut gt = Tensor::zeros(&[1, g.cols()]);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (o, v) in gt.data_mut().iter_mut().zip(g.row(r)) {
                            *o += beta * v;
                        }
                    }
                    self.accumulate(adj, *token, gt);
                }
            }
        }
    }
}

/// `x * Phi(x)` with the exact Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Row-wise max-subtracted softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = libm::exp(v - m);
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    Tensor::matrix(r, c, out)
}

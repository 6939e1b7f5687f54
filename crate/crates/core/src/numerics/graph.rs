//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters are borrowed from a [`ParamStore`] rather than copied, and the
//! gradient of each parameter is reported under its store name. Embedding
//! lookups (`gather`) produce row-sparse gradients so large vocabularies do
//! not cost a dense buffer per sample.

use std::collections::{BTreeMap, HashMap};

use crate::error::{dim_err, Error, Result};

use super::kernels;
use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<'a> {
    Leaf,
    Param(&'a str),
    Gather {
        name: &'a str,
        rows: Vec<usize>,
        table_numel: usize,
    },
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Take { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    ContrastiveNll { scores: Var, probs: Vec<f64> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op<'a>,
    needs_grad: bool,
}

/// Gradient of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    /// Row index → gradient of that row; untouched rows are zero.
    Rows { cols: usize, rows: BTreeMap<usize, Vec<f64>> },
}

impl ParamGrad {
    fn add_dense(&mut self, g: &[f64], numel: usize) {
        match self {
            ParamGrad::Dense(d) => kernels::axpy(1.0, g, d),
            ParamGrad::Rows { .. } => {
                let mut d = self.to_dense(numel);
                kernels::axpy(1.0, g, &mut d);
                *self = ParamGrad::Dense(d);
            }
        }
    }

    fn add_row(&mut self, row: usize, g: &[f64], cols: usize) {
        match self {
            ParamGrad::Dense(d) => kernels::axpy(1.0, g, &mut d[row * cols..(row + 1) * cols]),
            ParamGrad::Rows { rows, .. } => {
                let r = rows.entry(row).or_insert_with(|| vec![0.0; cols]);
                kernels::axpy(1.0, g, r);
            }
        }
    }

    /// Materializes the gradient as a dense buffer of `numel` values.
    pub fn to_dense(&self, numel: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(d) => d.clone(),
            ParamGrad::Rows { cols, rows } => {
                let mut d = vec![0.0; numel];
                for (&r, g) in rows {
                    d[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                d
            }
        }
    }

    fn scaled_add(&mut self, other: &ParamGrad, scale: f64, numel: usize) {
        match (self as &mut ParamGrad, other) {
            (ParamGrad::Dense(d), ParamGrad::Dense(o)) => kernels::axpy(scale, o, d),
            (ParamGrad::Dense(d), ParamGrad::Rows { cols, rows }) => {
                for (&r, g) in rows {
                    kernels::axpy(scale, g, &mut d[r * cols..(r + 1) * cols]);
                }
            }
            (ParamGrad::Rows { rows, cols }, ParamGrad::Rows { rows: o, .. }) => {
                for (&r, g) in o {
                    let dst = rows.entry(r).or_insert_with(|| vec![0.0; *cols]);
                    kernels::axpy(scale, g, dst);
                }
            }
            (this @ ParamGrad::Rows { .. }, ParamGrad::Dense(o)) => {
                let mut d = this.to_dense(numel);
                kernels::axpy(scale, o, &mut d);
                *this = ParamGrad::Dense(d);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            ParamGrad::Dense(d) => d.iter_mut().for_each(|x| *x *= s),
            ParamGrad::Rows { rows, .. } => rows
                .values_mut()
                .for_each(|r| r.iter_mut().for_each(|x| *x *= s)),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ParamGrad::Dense(d) => d.iter().all(|x| x.is_finite()),
            ParamGrad::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        }
    }
}

/// Parameter gradients keyed by parameter name, plus gradients of any leaf
/// inputs that were marked as requiring gradients.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<String, (usize, ParamGrad)>,
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&ParamGrad> {
        self.params.get(name).map(|(_, g)| g)
    }

    /// Dense gradient of a parameter with `numel` entries (zeros if untouched).
    pub fn param_dense(&self, name: &str, numel: usize) -> Vec<f64> {
        self.param(name)
            .map(|g| g.to_dense(numel))
            .unwrap_or_else(|| vec![0.0; numel])
    }

    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamGrad)> {
        self.params.iter().map(|(n, (_, g))| (n.as_str(), g))
    }

    /// `self += scale * other`, parameter by parameter. Leaf gradients are
    /// not carried over.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (name, (numel, g)) in &other.params {
            match self.params.get_mut(name) {
                Some((_, mine)) => mine.scaled_add(g, scale, *numel),
                None => {
                    let mut g = g.clone();
                    g.scale(scale);
                    self.params.insert(name.clone(), (*numel, g));
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|(_, g)| g.is_finite())
            && self.leaves.values().flatten().all(|x| x.is_finite())
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn is_scalar(t: &Tensor) -> bool {
    t.numel() == 1
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err(format!("{what} expects a 2-D tensor, got {s:?}"))),
    }
}

impl<'a> Graph<'a> {
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
        self.nodes[v.0].value.get()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf input; gradients are tracked when `t.requires_grad` is set and
    /// can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// A constant leaf (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Borrows a parameter from a store. Differentiated when the stored
    /// tensor has `requires_grad` set.
    pub fn param(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        let (name, t) = store.entry(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param(name),
            needs_grad: t.requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Row lookup into a 2-D parameter table.
    pub fn gather(&mut self, store: &'a ParamStore, name: &str, rows: &[usize]) -> Result<Var> {
        let (name, table) = store.entry(name)?;
        let (n, cols) = require_2d(table, "gather")?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Input(format!(
                    "row {r} out of range for `{name}` with {n} rows"
                )));
            }
            data.extend_from_slice(table.row_slice(r));
        }
        let out = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                name,
                rows: rows.to_vec(),
                table_numel: table.numel(),
            },
            table.requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d(self.value(a), "matmul")?;
        let (k2, n) = require_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(dim_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d(self.value(a), "matmul_bt")?;
        let (n, k2) = require_2d(self.value(b), "matmul_bt")?;
        if k != k2 {
            return Err(dim_err(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBT(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!(
                "add {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let cols = tx.cols();
        if tr.numel() != cols {
            return Err(dim_err(format!(
                "add_row: row of {} values for {} columns",
                tr.numel(),
                cols
            )));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            kernels::axpy(1.0, tr.data(), chunk);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!(
                "mul {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(dim_err("softmax of an empty tensor"));
        }
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            kernels::softmax_in_place(chunk);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = require_2d(self.value(x), "slice_cols")?;
        if start + len > cols {
            return Err(dim_err(format!(
                "slice_cols {start}..{} of {cols}",
                start + len
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let (rows, _) = require_2d(self.value(*first), "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = require_2d(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols: row counts differ"));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim_err("concat_rows: column counts differ"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Picks flat entries of a 1-D tensor or single-row matrix, keeping rank.
    pub fn take(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 {
            return Err(dim_err("take expects a vector or a single row"));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(
                *t.data()
                    .get(i)
                    .ok_or_else(|| dim_err(format!("take index {i} out of range")))?,
            );
        }
        let shape = if t.shape().len() == 2 {
            vec![1, idx.len()]
        } else {
            vec![idx.len()]
        };
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Take {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().with_grad(false).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// `−ln softmax(scores)[0]`: the sampled-softmax contrastive loss with the
    /// positive score first and the negative scores after it.
    pub fn contrastive_nll(&mut self, scores: Var) -> Result<Var> {
        let t = self.value(scores);
        if t.rows() != 1 || t.numel() < 2 {
            return Err(dim_err(
                "contrastive loss needs one positive and at least one negative score",
            ));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite score in contrastive loss".into()));
        }
        let lse = kernels::log_sum_exp(t.data());
        let loss = lse - t.data()[0];
        let probs = t.data().iter().map(|s| (s - lse).exp()).collect();
        let needs = self.needs(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ContrastiveNll { scores, probs },
            needs,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(dim_err("layer_norm gain/bias width mismatch"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !is_scalar(self.value(loss)) {
            return Err(dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(name) => {
                    let numel = node.value.get().numel();
                    out.params
                        .entry((*name).to_string())
                        .or_insert_with(|| (numel, ParamGrad::Dense(vec![0.0; numel])))
                        .1
                        .add_dense(&g, numel);
                }
                Op::Gather {
                    name,
                    rows,
                    table_numel,
                } => {
                    let cols = node.value.get().cols();
                    let entry = out.params.entry((*name).to_string()).or_insert_with(|| {
                        (
                            *table_numel,
                            ParamGrad::Rows {
                                cols,
                                rows: BTreeMap::new(),
                            },
                        )
                    });
                    for (k, &r) in rows.iter().enumerate() {
                        entry.1.add_row(r, &g[k * cols..(k + 1) * cols], cols);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = require_2d(self.value(*a), "matmul")?;
                    let n = self.value(*b).cols();
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        kernels::matmul_bt_acc(&g, self.value(*b).data(), ga, m, n, k);
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        kernels::matmul_at_acc(self.value(*a).data(), &g, gb, m, k, n);
                    }
                }
                Op::MatMulBT(a, b) => {
                    let (m, k) = require_2d(self.value(*a), "matmul_bt")?;
                    let n = self.value(*b).rows();
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        kernels::matmul_acc(&g, self.value(*b).data(), ga, m, n, k);
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, n * k);
                        kernels::matmul_at_acc(&g, self.value(*a).data(), gb, m, n, k);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            kernels::axpy(1.0, &g, slot(&mut grads, v, g.len()));
                        }
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*x) {
                        kernels::axpy(1.0, &g, slot(&mut grads, *x, g.len()));
                    }
                    if self.needs(*row) {
                        let cols = self.value(*row).numel();
                        let gr = slot(&mut grads, *row, cols);
                        for chunk in g.chunks(cols) {
                            kernels::axpy(1.0, chunk, gr);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b).data();
                        let ga = slot(&mut grads, *a, g.len());
                        for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    if self.needs(*b) {
                        let av = self.value(*a).data();
                        let gb = slot(&mut grads, *b, g.len());
                        for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    kernels::axpy(*s, &g, slot(&mut grads, *x, g.len()));
                }
                Op::Tanh(x) => {
                    let y = node.value.get().data();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((d, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.get();
                    let cols = y.cols();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((gy, yr), dx) in g
                        .chunks(cols)
                        .zip(y.data().chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let inner = kernels::dot(gy, yr);
                        for j in 0..cols {
                            dx[j] += yr[j] * (gy[j] - inner);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = require_2d(self.value(*x), "slice_cols")?;
                    let len = node.value.get().cols();
                    let gx = slot(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        kernels::axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut gx[r * cols + start..r * cols + start + len],
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.get().rows();
                    let total = node.value.get().cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.needs(p) {
                            let gp = slot(&mut grads, p, rows * c);
                            for r in 0..rows {
                                kernels::axpy(
                                    1.0,
                                    &g[r * total + offset..r * total + offset + c],
                                    &mut gp[r * c..(r + 1) * c],
                                );
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        if self.needs(p) {
                            kernels::axpy(1.0, &g[offset..offset + n], slot(&mut grads, p, n));
                        }
                        offset += n;
                    }
                }
                Op::Take { x, idx } => {
                    let n = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
                Op::Reshape(x) => {
                    kernels::axpy(1.0, &g, slot(&mut grads, *x, g.len()));
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::ContrastiveNll { scores, probs } => {
                    let gx = slot(&mut grads, *scores, probs.len());
                    for (j, p) in probs.iter().enumerate() {
                        let target = if j == 0 { 1.0 } else { 0.0 };
                        gx[j] += g[0] * (p - target);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = self.value(*gamma).numel();
                    let gam = self.value(*gamma).data().to_vec();
                    if self.needs(*gamma) {
                        let gg = slot(&mut grads, *gamma, cols);
                        for (gy, h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                gg[j] += gy[j] * h[j];
                            }
                        }
                    }
                    if self.needs(*beta) {
                        let gb = slot(&mut grads, *beta, cols);
                        for gy in g.chunks(cols) {
                            kernels::axpy(1.0, gy, gb);
                        }
                    }
                    if self.needs(*x) {
                        let n = cols as f64;
                        let gx = slot(&mut grads, *x, g.len());
                        for (r, ((gy, h), dx)) in g
                            .chunks(cols)
                            .zip(xhat.chunks(cols))
                            .zip(gx.chunks_mut(cols))
                            .enumerate()
                        {
                            let dh: Vec<f64> = gy.iter().zip(&gam).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h = kernels::dot(&dh, h);
                            for j in 0..cols {
                                dx[j] += inv_std[r] / n * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap().with_grad(true));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn dot_self_gives_twice() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
        let d = g.dot(p, p).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
        assert!(matches!(g.backward(p), Err(Error::Dimension(_))));
    }

    #[test]
    fn gather_gives_sparse_rows() {
        let mut store = ParamStore::new();
        store
            .insert(
                "emb",
                Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
                    .unwrap()
                    .with_grad(true),
            )
            .unwrap();
        let mut g = Graph::new();
        let x = g.gather(&store, "emb", &[2, 0, 2]).unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        match grads.param("emb").unwrap() {
            ParamGrad::Rows { rows, .. } => {
                assert_eq!(rows.len(), 2);
                assert_eq!(rows[&2], vec![2.0, 2.0]);
                assert_eq!(rows[&0], vec![1.0, 1.0]);
            }
            other => panic!("expected sparse rows, got {other:?}"),
        }
        assert_eq!(grads.param_dense("emb", 6), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn frozen_param_has_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::identity(2)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.input(Tensor::row(vec![1.0, 2.0]).with_grad(true));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.param("w").is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_out_of_range_is_input_error() {
        let mut store = ParamStore::new();
        store.insert("emb", Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        assert!(matches!(g.gather(&store, "emb", &[2]), Err(Error::Input(_))));
    }
}

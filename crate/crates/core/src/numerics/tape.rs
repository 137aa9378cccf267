//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive with its forward value. Parameters
//! enter through [`Tape::param`], which deduplicates by [`ParamId`] so that
//! reusing a weight accumulates its gradient. Nodes that depend only on
//! constants are marked as not needing a gradient and are skipped by
//! [`Tape::backward`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifier of a trainable tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Softplus(Var),
    Sqrt(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanRows(Var),
    Transpose(Var),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Pick(Var, usize, usize),
    Im2Col(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let sm = softmax_row(m.row(r));
        out.row_mut(r).copy_from_slice(&sm);
    }
    out
}

/// Zero-padded sliding windows: row `t` holds rows `t-h..=t+h` of `a`
/// side by side, `h = (kernel - 1) / 2`.
pub fn im2col(a: &Matrix, kernel: usize) -> Matrix {
    let (l, d) = a.shape();
    let half = (kernel / 2) as isize;
    let mut out = Matrix::zeros(l, d * kernel);
    for t in 0..l {
        for j in 0..kernel {
            let src = t as isize + j as isize - half;
            if src < 0 || src >= l as isize {
                continue;
            }
            out.row_mut(t)[j * d..(j + 1) * d].copy_from_slice(a.row(src as usize));
        }
    }
    out
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter store (for checks).
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols(), "row broadcast width mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bv.row(0)) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Hadamard(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `s · a` for a `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a).scale(self.value(s).item());
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut v = av.clone();
        for r in 0..av.rows() {
            let row = av.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for x in v.row_mut(r) {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.rows();
        let mut v = Matrix::zeros(1, av.cols());
        for r in 0..m {
            for (x, y) in v.row_mut(0).iter_mut().zip(av.row(r)) {
                *x += y;
            }
        }
        let v = v.scale(1.0 / m as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Selects columns `idx` (in order) from every row.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut v = Matrix::zeros(av.rows(), idx.len());
        for r in 0..av.rows() {
            for (k, &c) in idx.iter().enumerate() {
                v[(r, k)] = av[(r, c)];
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherCols(a, idx.to_vec()), ng)
    }

    /// Inverse of [`Tape::gather_cols`]: places column `k` of `a` at
    /// `idx[k]` in a zero matrix of width `width`.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Var {
        let av = self.value(a);
        let mut v = Matrix::zeros(av.rows(), width);
        for r in 0..av.rows() {
            for (k, &c) in idx.iter().enumerate() {
                v[(r, c)] = av[(r, k)];
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::ScatterCols(a, idx.to_vec()), ng)
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Matrix::scalar(self.value(a)[(r, c)]);
        let ng = self.ng(a);
        self.push(v, Op::Pick(a, r, c), ng)
    }

    pub fn im2col(&mut self, a: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let v = im2col(self.value(a), kernel);
        let ng = self.ng(a);
        self.push(v, Op::Im2Col(a, kernel), ng)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self
                .params
                .iter()
                .map(|(&id, &v)| (id, self.value(v).shape()))
                .collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.matmul_t(self.value(b)));
                }
                if self.ng(b) {
                    self.acc(grads, b, self.value(a).t_matmul(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.matmul(self.value(b)));
                }
                if self.ng(b) {
                    self.acc(grads, b, g.t_matmul(self.value(a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.scale(-1.0));
            }
            Op::AddRow(a, b) => {
                self.acc(grads, a, g.clone());
                if self.ng(b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::Hadamard(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.hadamard(self.value(b)));
                }
                if self.ng(b) {
                    self.acc(grads, b, g.hadamard(self.value(a)));
                }
            }
            Op::Scale(a, c) => self.acc(grads, a, g.scale(c)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(s).item();
                if self.ng(a) {
                    self.acc(grads, a, g.scale(sv));
                }
                if self.ng(s) {
                    let ds = g.hadamard(self.value(a)).sum();
                    self.acc(grads, s, Matrix::scalar(ds));
                }
            }
            Op::Gelu(a) => {
                let d = self.value(a).map(gelu_grad);
                self.acc(grads, a, g.hadamard(&d));
            }
            Op::Softplus(a) => {
                let d = self.value(a).map(sigmoid);
                self.acc(grads, a, g.hadamard(&d));
            }
            Op::Sqrt(a) => {
                let d = g.zip_with(out, |gi, y| gi / (2.0 * y));
                self.acc(grads, a, d);
            }
            Op::Recip(a) => {
                let d = g.zip_with(out, |gi, y| -gi * y * y);
                self.acc(grads, a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, x) in d.row_mut(r).iter_mut().enumerate() {
                        *x = y[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gr = g.row(r);
                    let gs: f64 = gr.iter().sum();
                    for (c, x) in d.row_mut(r).iter_mut().enumerate() {
                        *x = gr[c] - out[(r, c)].exp() * gs;
                    }
                }
                self.acc(grads, a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.acc(grads, a, Matrix::filled(r, c, g.item()));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(a).shape();
                let mut d = Matrix::zeros(m, n);
                for r in 0..m {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *x = y / m as f64;
                    }
                }
                self.acc(grads, a, d);
            }
            Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            Op::GatherCols(a, ref idx) => {
                let (m, n) = self.value(a).shape();
                let mut d = Matrix::zeros(m, n);
                for r in 0..m {
                    for (k, &c) in idx.iter().enumerate() {
                        d[(r, c)] += g[(r, k)];
                    }
                }
                self.acc(grads, a, d);
            }
            Op::ScatterCols(a, ref idx) => {
                let (m, n) = self.value(a).shape();
                let mut d = Matrix::zeros(m, n);
                for r in 0..m {
                    for (k, &c) in idx.iter().enumerate() {
                        d[(r, k)] = g[(r, c)];
                    }
                }
                self.acc(grads, a, d);
            }
            Op::Pick(a, r, c) => {
                let (m, n) = self.value(a).shape();
                let mut d = Matrix::zeros(m, n);
                d[(r, c)] = g.item();
                self.acc(grads, a, d);
            }
            Op::Im2Col(a, kernel) => {
                let (l, dim) = self.value(a).shape();
                let half = (kernel / 2) as isize;
                let mut d = Matrix::zeros(l, dim);
                for t in 0..l {
                    for j in 0..kernel {
                        let src = t as isize + j as isize - half;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let grow = &g.row(t)[j * dim..(j + 1) * dim];
                        for (x, y) in d.row_mut(src as usize).iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                }
                self.acc(grads, a, d);
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, Var>,
    shapes: BTreeMap<ParamId, (usize, usize)>,
}

impl Gradients {
    /// Gradient of a bound parameter; exactly zero when the loss does not
    /// reach it. `None` if the parameter was never bound on the tape.
    pub fn param(&self, id: ParamId) -> Option<Matrix> {
        let v = *self.params.get(&id)?;
        let (r, c) = self.shapes[&id];
        Some(
            self.grads
                .get(v.0)
                .and_then(Clone::clone)
                .unwrap_or_else(|| Matrix::zeros(r, c)),
        )
    }

    /// Gradient with respect to any node (zero if unreachable).
    pub fn var(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads
            .get(v.0)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let fp = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let fm = f(&probe);
        probe.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error used by the gradient checks: `|a − b| / max(1, |a|, |b|)`
/// taken entry-wise, maximum over entries.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &b)| (a - b).abs() / 1f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}

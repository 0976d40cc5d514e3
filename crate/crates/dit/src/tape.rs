//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of every node that depends on a parameter.

use std::ops::Range;
use std::sync::Arc;

use layered_core::attention::{apply_weights, attention_weights, BiasMatrix};
use ndarray::{s, Array2, Axis};

use crate::error::Result;

pub type Var = usize;

enum Op {
    Const,
    Param(usize),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<f64>> },
    Mse { a: Var, target: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Const => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn param(&mut self, id: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(id), &[])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// `a + row` with `row` (1 × m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row` with `row` (1 × m) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut out = Array2::zeros((n, m));
        let mut rstd = Vec::with_capacity(n);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            out.row_mut(i).assign(&row.mapv(|v| (v - mean) * r));
        }
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, r: Range<usize>) -> Var {
        let v = self.value(a).slice(s![r.clone(), ..]).to_owned();
        self.push(v, Op::SliceRows(a, r), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, r: Range<usize>) -> Var {
        let v = self.value(a).slice(s![.., r.clone()]).to_owned();
        self.push(v, Op::SliceCols(a, r), &[a])
    }

    /// Multi-head biased softmax attention; every head uses `bias`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Arc<BiasMatrix>, heads: usize) -> Result<Var> {
        let (l, d) = self.value(q).dim();
        let dh = d / heads;
        let mut out = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = attention_weights(self.value(q).slice(cols), self.value(k).slice(cols), &bias)?;
            let o = apply_weights(p.view(), self.value(v).slice(cols), &bias);
            out.slice_mut(cols).assign(&o);
            probs.push(p);
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Mean squared error against a constant target; a 1 × 1 node.
    pub fn mse(&mut self, a: Var, target: Array2<f64>) -> Var {
        let diff = self.value(a) - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { a, target }, &[a])
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], i: Var, g: Array2<f64>) {
        match &mut grads[i] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradients of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array2::ones(self.value(root).dim()));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let need = |v: Var| self.nodes[v].requires_grad;
            match &node.op {
                Op::Const | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMulT(a, b) => {
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if need(*b) {
                        Self::accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        Self::accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if need(*row) {
                        Self::accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if need(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        Self::accumulate(&mut grads, *row, gr);
                    }
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::AddScalar(a) => Self::accumulate(&mut grads, *a, g),
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let m = y.ncols() as f64;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.sum() / m;
                        let mean_gy = gy.dot(&yr) / m;
                        let mut out = gx.row_mut(r);
                        for c in 0..y.ncols() {
                            out[c] = rstd[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    Self::accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let ga = ndarray::Zip::from(&g).and(self.value(*a)).map_collect(|g, x| g * gelu_grad(*x));
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let ga = ndarray::Zip::from(&g).and(self.value(*a)).map_collect(|g, x| {
                        let sg = sigmoid(*x);
                        g * sg * (1.0 + x * (1.0 - sg))
                    });
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if need(p) {
                            Self::accumulate(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceRows(a, r) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![r.clone(), ..]).assign(&g);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, r) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., r.clone()]).assign(&g);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot: f64 = row.sum();
                            row.zip_mut_with(&prow, |x, pv| *x -= pv * dot);
                        }
                        ds.mapv_inplace(|x| x * scale);
                        gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if need(*q) {
                        Self::accumulate(&mut grads, *q, gq);
                    }
                    if need(*k) {
                        Self::accumulate(&mut grads, *k, gk);
                    }
                    if need(*v) {
                        Self::accumulate(&mut grads, *v, gv);
                    }
                }
                Op::Mse { a, target } => {
                    let n = target.len() as f64;
                    let scale = 2.0 * g[[0, 0]] / n;
                    let ga = (self.value(*a) - target).mapv(|d| d * scale);
                    Self::accumulate(&mut grads, *a, ga);
                }
            }
        }
        grads
    }

    /// Backward pass folded into one gradient per parameter id.
    pub fn param_grads(&self, root: Var, shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
        let grads = self.backward(root);
        let mut out: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out[*id] += &g;
            }
        }
        out
    }
}

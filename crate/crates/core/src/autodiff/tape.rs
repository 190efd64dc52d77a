//! Define-by-run reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the record in exact reverse order and
//! accumulates adjoints into every leaf created with `requires_grad`.
//! Build a fresh tape per forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    Reshape(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: f64 },
    Shift(usize),
    Sum(usize),
    Transpose { a: usize, rows: usize, cols: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Dropout { a: usize, mask: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    Pick { a: usize, index: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    CosSim(usize, usize),
    Reverse { a: usize, lambda: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<Vec<(ParamId, usize)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Binding the same parameter twice
    /// returns the same leaf, so every use shares one gradient buffer.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&(_, node)) = self.bound.borrow().iter().find(|(p, _)| *p == id) {
            return Var { tape: self, id: node };
        }
        let v = self.push_rc(store.shared(id), Op::Leaf, true);
        self.bound.borrow_mut().push((id, v.id));
        v
    }

    /// Accumulated gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let nodes = self.nodes.borrow();
        self.bound
            .borrow()
            .iter()
            .map(|&(pid, node)| {
                let n = &nodes[node];
                let g = n
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; n.value.len()]);
                (pid, Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Reshape(a) => accumulate(&mut adj, &nodes, *a, |d| add_into(d, &g)),
                Op::MatMul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    let bv = nodes[b].value.clone();
                    let av = nodes[a].value.clone();
                    accumulate(&mut adj, &nodes, a, |d| gemm_nt_acc(d, &g, bv.data(), m, k, n));
                    accumulate(&mut adj, &nodes, b, |d| gemm_tn_acc(d, av.data(), &g, m, k, n));
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, &nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut adj, &nodes, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, &nodes, *a, |d| add_into(d, &g));
                    accumulate(&mut adj, &nodes, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv.data()) {
                            *d += g * y;
                        }
                    });
                    accumulate(&mut adj, &nodes, *b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(av.data()) {
                            *d += g * x;
                        }
                    });
                }
                Op::AddRow { a, row } => {
                    accumulate(&mut adj, &nodes, *a, |d| add_into(d, &g));
                    let cols = out.cols();
                    accumulate(&mut adj, &nodes, *row, |d| {
                        for r in g.chunks(cols) {
                            add_into(d, r);
                        }
                    });
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    accumulate(&mut adj, &nodes, *a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g)
                    });
                }
                Op::Shift(a) => accumulate(&mut adj, &nodes, *a, |d| add_into(d, &g)),
                Op::Sum(a) => {
                    let s = g[0];
                    accumulate(&mut adj, &nodes, *a, |d| d.iter_mut().for_each(|d| *d += s));
                }
                Op::Transpose { a, rows, cols } => {
                    let (r, c) = (*rows, *cols);
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let cols = out.cols();
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((dr, gr), yr) in d
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(out.data().chunks(cols))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                            for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += y * (g - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let cols = out.cols();
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((dr, gr), yr) in d
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(out.data().chunks(cols))
                        {
                            let total: f64 = gr.iter().sum();
                            for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += g - y.exp() * total;
                            }
                        }
                    });
                }
                Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                    let cols = out.cols();
                    let gam = nodes[*gamma].value.clone();
                    accumulate(&mut adj, &nodes, *gamma, |d| {
                        for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((d, g), x) in d.iter_mut().zip(gr).zip(xr) {
                                *d += g * x;
                            }
                        }
                    });
                    accumulate(&mut adj, &nodes, *beta, |d| {
                        for gr in g.chunks(cols) {
                            add_into(d, gr);
                        }
                    });
                    accumulate(&mut adj, &nodes, *a, |d| {
                        let inv_n = 1.0 / cols as f64;
                        let mut dxhat = vec![0.0; cols];
                        for (((dr, gr), xr), rs) in d
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(xhat.chunks(cols))
                            .zip(rstd)
                        {
                            for ((dx, g), gm) in dxhat.iter_mut().zip(gr).zip(gam.data()) {
                                *dx = g * gm;
                            }
                            let mean_dx: f64 = dxhat.iter().sum::<f64>() * inv_n;
                            let mean_dxx: f64 =
                                dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() * inv_n;
                            for ((d, dx), x) in dr.iter_mut().zip(&dxhat).zip(xr) {
                                *d += rs * (dx - mean_dx - x * mean_dxx);
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let xv = nodes[*a].value.clone();
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xv.data()) {
                            *d += g * gelu_grad(*x);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xv = nodes[*a].value.clone();
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xv.data()) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Dropout { a, mask } => {
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                            *d += g * m;
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let cols = out.cols();
                    accumulate(&mut adj, &nodes, *table, |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut d[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::Pick { a, index } => {
                    let s = g[0];
                    let index = *index;
                    accumulate(&mut adj, &nodes, *a, |d| d[index] += s);
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        accumulate(&mut adj, &nodes, p, |d| {
                            for (dr, gr) in d.chunks_mut(pc).zip(g.chunks(total)) {
                                add_into(dr, &gr[offset..offset + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        accumulate(&mut adj, &nodes, p, |d| add_into(d, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::SliceRows { a, start } => {
                    let cols = out.cols();
                    let off = start * cols;
                    accumulate(&mut adj, &nodes, *a, |d| add_into(&mut d[off..off + g.len()], &g));
                }
                Op::SliceCols { a, start } => {
                    let width = out.cols();
                    let src_cols = nodes[*a].value.cols();
                    let start = *start;
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for (dr, gr) in d.chunks_mut(src_cols).zip(g.chunks(width)) {
                            add_into(&mut dr[start..start + width], gr);
                        }
                    });
                }
                Op::CosSim(a, b) => {
                    let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
                    let (na, nb) = (av.norm(), bv.norm());
                    let c = out.item();
                    let s = g[0];
                    accumulate(&mut adj, &nodes, *a, |d| {
                        for ((d, x), y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                            *d += s * (y / (na * nb) - c * x / (na * na));
                        }
                    });
                    accumulate(&mut adj, &nodes, *b, |d| {
                        for ((d, x), y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                            *d += s * (x / (na * nb) - c * y / (nb * nb));
                        }
                    });
                }
                Op::Reverse { a, lambda } => {
                    let c = -*lambda;
                    accumulate(&mut adj, &nodes, *a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g)
                    });
                }
            }
        }

        for (i, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                let node = &mut nodes[i];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    match &mut node.grad {
                        Some(buf) => add_into(buf, &a),
                        None => node.grad = Some(a),
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].requires_grad {
        return;
    }
    let buf = adj[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(buf);
}

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let t = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, present once a backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.rg();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.rg() || other.rg();
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars must share a tape");
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::dim("reshape", v.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, a.data(), b.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, t, Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    fn zip_with(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, t, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, t, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, t, Op::Mul(self.id, other.id)))
    }

    /// Adds a row vector (length = cols) to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let (a, r) = (self.value(), row.value());
        if r.len() != a.cols() {
            return Err(Error::dim("add_row", a.shape(), r.shape()));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(a.cols()) {
            add_into(chunk, r.data());
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(row, t, Op::AddRow { a: self.id, row: row.id }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Scale { a: self.id, c })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Shift(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = match a.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => return Err(Error::dim("transpose", s, &[2])),
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.unary(t, Op::Transpose { a: self.id, rows: r, cols: c }))
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        if !a.is_finite() {
            return Err(Error::Numeric("softmax"));
        }
        let cols = a.cols();
        let mut data = vec![0.0; a.len()];
        for (d, s) in data.chunks_mut(cols).zip(a.data().chunks(cols)) {
            softmax_row(s, d);
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::Softmax(self.id)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        if !a.is_finite() {
            return Err(Error::Numeric("log_softmax"));
        }
        let cols = a.cols();
        let mut data = vec![0.0; a.len()];
        for (d, s) in data.chunks_mut(cols).zip(a.data().chunks(cols)) {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + s.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (d, x) in d.iter_mut().zip(s) {
                *d = x - lse;
            }
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::LogSoftmax(self.id)))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (a, gm, bt) = (self.value(), gamma.value(), beta.value());
        let cols = a.cols();
        if gm.len() != cols || bt.len() != cols {
            return Err(Error::dim("layer_norm", a.shape(), gm.shape()));
        }
        let mut out = vec![0.0; a.len()];
        let mut xhat = vec![0.0; a.len()];
        let mut rstd = Vec::with_capacity(a.rows());
        for ((src, o), xh) in a
            .data()
            .chunks(cols)
            .zip(out.chunks_mut(cols))
            .zip(xhat.chunks_mut(cols))
        {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                xh[j] = (src[j] - mean) * rs;
                o[j] = xh[j] * gm.data()[j] + bt.data()[j];
            }
        }
        let t = Tensor::new(a.shape().to_vec(), out)?;
        let rg = self.rg() || gamma.rg() || beta.rg();
        Ok(self.tape.push(
            t,
            Op::LayerNorm { a: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            rg,
        ))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Relu(self.id))
    }

    /// Inverted dropout. Identity when `rng` is `None` (evaluation) or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: Option<&mut R>) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(self) };
        if p == 0.0 {
            return Ok(self);
        }
        let a = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::Dropout { a: self.id, mask }))
    }

    /// Gathers rows of an embedding table (`self` is `[vocab, dim]`).
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let (vocab, dim) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, size: vocab });
            }
            data.extend_from_slice(table.row(id));
        }
        let t = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.unary(t, Op::Embedding { table: self.id, ids: ids.to_vec() }))
    }

    /// Scalar element at flat `index`.
    pub fn pick(self, index: usize) -> Result<Var<'t>> {
        let a = self.value();
        if index >= a.len() {
            return Err(Error::Label(format!("index {index} out of range {}", a.len())));
        }
        Ok(self.unary(Tensor::scalar(a.data()[index]), Op::Pick { a: self.id, index }))
    }

    /// `-logp[index]` for a vector of log-probabilities.
    pub fn cross_entropy_from_logprobs(self, index: usize) -> Result<Var<'t>> {
        Ok(self.pick(index)?.neg())
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start > end || end > a.rows() {
            return Err(Error::dim("slice_rows", a.shape(), &[start, end]));
        }
        let cols = a.cols();
        let data = a.data()[start * cols..end * cols].to_vec();
        let t = Tensor::new(vec![end - start, cols], data)?;
        Ok(self.unary(t, Op::SliceRows { a: self.id, start }))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if start > end || end > cols {
            return Err(Error::dim("slice_cols", a.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(a.rows() * (end - start));
        for r in a.data().chunks(cols) {
            data.extend_from_slice(&r[start..end]);
        }
        let t = Tensor::new(vec![a.rows(), end - start], data)?;
        Ok(self.unary(t, Op::SliceCols { a: self.id, start }))
    }

    /// Cosine similarity of two equally-shaped tensors, as a scalar.
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.len() != b.len() {
            return Err(Error::dim("cosine_similarity", a.shape(), b.shape()));
        }
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector("cosine_similarity"));
        }
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let c = (dot / (na * nb)).clamp(-1.0, 1.0);
        Ok(self.binary(other, Tensor::scalar(c), Op::CosSim(self.id, other.id)))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` backward.
    pub fn gradient_reversal(self, lambda: f64) -> Result<Var<'t>> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("gradient reversal lambda {lambda} must be >= 0")));
        }
        let v = self.value();
        let rg = self.rg();
        Ok(self.tape.push_rc(v, Op::Reverse { a: self.id, lambda }, rg))
    }

    /// Blocks all gradient flow into `self`.
    pub fn detach(self) -> Var<'t> {
        self.tape.push_rc(self.value(), Op::Leaf, false)
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = vals[0].rows();
    if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
        return Err(Error::dim("concat_cols", vals[0].shape(), bad.shape()));
    }
    let total: usize = vals.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &vals {
            data.extend_from_slice(v.row(r));
        }
    }
    let t = Tensor::new(vec![rows, total], data)?;
    let rg = parts.iter().any(|p| p.rg());
    Ok(first.tape.push(t, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
}

/// Stacks matrices with equal column counts along rows.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let cols = vals[0].cols();
    if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
        return Err(Error::dim("concat_rows", vals[0].shape(), bad.shape()));
    }
    let rows: usize = vals.iter().map(|v| v.rows()).sum();
    let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
    let t = Tensor::new(vec![rows, cols], data)?;
    let rg = parts.iter().any(|p| p.rg());
    Ok(first.tape.push(t, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
}

/// Sum of scalar vars.
pub fn sum_all<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut it = parts.iter().copied();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Contract("sum of zero tensors".into()))?;
    for p in it {
        acc = acc.add(p)?;
    }
    Ok(acc)
}

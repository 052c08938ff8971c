//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in evaluation order. Frozen weights
//! enter as borrowed constants, so building a forward pass never copies model
//! parameters. Only nodes reachable from a [`Graph::param`] leaf carry
//! gradients; everything else is skipped during the backward sweep.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Ln(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    SumRows(Var),
    MeanAll(Var),
    L2NormalizeRows(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Sum in ascending order, so the result does not depend on element order.
fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
    }
    let inv = 1.0 / order_free_sum(out.to_vec());
    out.iter_mut().for_each(|o| *o *= inv);
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + order_free_sum(row.iter().map(|&x| (x - max).exp()).collect()).ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An owned constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A borrowed constant leaf (frozen weights).
    pub fn weight(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Shape(format!(
                "matmul_t {:?} by transpose of {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = va.matmul_t(vb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds the 1×n `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                va.shape(),
                vr.shape()
            )));
        }
        let mut value = va.clone();
        let r = vr.row(0).to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Tensor::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            softmax_row(va.row(i), value.row_mut(i));
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Tensor::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            log_softmax_row(va.row(i), value.row_mut(i));
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {} rows",
                va.rows()
            )));
        }
        let value = va.slice_rows(start, end);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Column-wise mean → 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let ng = self.ng(&[a]);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Row-wise sum → m×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|i| va.row(i).iter().sum()).collect();
        let value = Tensor::from_vec(va.rows(), 1, data).expect("shape");
        let ng = self.ng(&[a]);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Mean of all entries → 1×1.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::row_vector(vec![va.sum() / va.len() as f64]);
        let ng = self.ng(&[a]);
        self.push(value, Op::MeanAll(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut value = va.clone();
        for i in 0..va.rows() {
            let n = dot(va.row(i), va.row(i)).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {n}; cannot normalize"
                )));
            }
            value.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::L2NormalizeRows(a), ng))
    }

    /// Reverse sweep from a scalar (1×1) output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y: &Tensor = &node.value;
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    acc(*a, g.matmul_t(vb), grads);
                }
                if self.needs_grad(*b) {
                    acc(*b, va.t_matmul(g), grads);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    acc(*a, g.matmul_unchecked(vb), grads);
                }
                if self.needs_grad(*b) {
                    acc(*b, g.t_matmul(va), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.scale(-1.0), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    acc(*a, g.zip_map(vb, |x, y| x * y), grads);
                }
                if self.needs_grad(*b) {
                    acc(*b, g.zip_map(va, |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.needs_grad(*row) {
                    let mut s = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, v) in s.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*row, Tensor::row_vector(s), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Gelu(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |gv, x| gv * gelu_grad(x)), grads);
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |gv, x| gv / x), grads);
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |gv, x| gv * sign(x)), grads);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                acc(*a, d, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * s;
                    }
                }
                acc(*a, d, grads);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.needs_grad(*p) {
                        acc(*p, g.slice_rows(start, start + rows), grads);
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs_grad(*a) {
                    let va = self.value(*a);
                    let mut d = Tensor::zeros(va.rows(), va.cols());
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(*a, d, grads);
                }
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let inv = 1.0 / va.rows() as f64;
                let mut d = Tensor::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v * inv;
                    }
                }
                acc(*a, d, grads);
            }
            Op::SumRows(a) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gv = g.get(i, 0);
                    d.row_mut(i).iter_mut().for_each(|o| *o = gv);
                }
                acc(*a, d, grads);
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let gv = g.get(0, 0) / va.len() as f64;
                acc(*a, Tensor::filled(va.rows(), va.cols(), gv), grads);
            }
            Op::L2NormalizeRows(a) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let n = dot(va.row(i), va.row(i)).sqrt();
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * s) / n;
                    }
                }
                acc(*a, d, grads);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when it did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

//! Reverse-mode differentiation over a recorded tape of primitive operations.
//!
//! Every primitive is evaluated eagerly when recorded; the tape keeps the
//! operation, its operand handles and the produced value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products in a fixed order, so
//! repeated runs produce bit-identical gradients.

use std::sync::Arc;

use super::sparse::CsrMatrix;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Aggregate(Arc<CsrMatrix<f64>>, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    Element(Var, usize, usize),
    GatherRows(Var, Arc<[usize]>),
    Sum(Var),
    ForwardCorrect(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `var`; zero-filled when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn eval<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::Add(a, b) => {
            let (a, b) = (val(*a), val(*b));
            a.same_shape(b, "add")?;
            let mut out = a.clone();
            out.add_assign(b);
            out
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            a.same_shape(b, "elementwise mul")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.rows(), a.cols(), data)?
        }
        Op::AddRowBias(m, b) => {
            let (mut m, b) = (val(*m).clone(), val(*b));
            if b.rows() != 1 || b.cols() != m.cols() {
                return Err(Error::Dimension(format!(
                    "row bias {:?} for matrix {:?}",
                    b.shape(),
                    m.shape()
                )));
            }
            for r in 0..m.rows() {
                for (x, y) in m.row_mut(r).iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            m
        }
        Op::ScaleBy(s, m) => {
            let s = val(*s).item().map_err(|_| Error::Dimension("scale factor must be 1x1".into()))?;
            val(*m).map(|x| s * x)
        }
        Op::Scale(m, c) => val(*m).map(|x| c * x),
        Op::Aggregate(w, h) => {
            let h = val(*h);
            if w.cols() != h.rows() {
                return Err(Error::Dimension(format!(
                    "aggregation {}x{} over {:?}",
                    w.rows(),
                    w.cols(),
                    h.shape()
                )));
            }
            let mut out = Tensor::zeros(w.rows(), h.cols());
            for v in 0..w.rows() {
                let dst = out.row_mut(v);
                for (u, weight) in w.row(v) {
                    for (d, x) in dst.iter_mut().zip(h.row(u)) {
                        *d += weight * x;
                    }
                }
            }
            out
        }
        Op::Relu(x) => val(*x).map(|v| v.max(0.0)),
        Op::Tanh(x) => val(*x).map(f64::tanh),
        Op::Sigmoid(x) => val(*x).map(sigmoid),
        Op::SoftmaxRows(x) => {
            let mut x = val(*x).clone();
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            x
        }
        Op::Log(x) => val(*x).map(f64::ln),
        Op::MeanRows(x) => {
            let x = val(*x);
            if x.rows() == 0 {
                return Err(Error::Dimension("mean over zero rows".into()));
            }
            let mut out = Tensor::zeros(1, x.cols());
            for r in 0..x.rows() {
                for (d, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                    *d += v;
                }
            }
            let n = x.rows() as f64;
            out.map(|v| v / n)
        }
        Op::ConcatCols(parts) => {
            let parts: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
            let rows = parts.first().map_or(0, |p| p.rows());
            if parts.iter().any(|p| p.rows() != rows) {
                return Err(Error::Dimension("concatenation with unequal row counts".into()));
            }
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in &parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::new(rows, cols, data)?
        }
        Op::Element(x, r, c) => {
            let x = val(*x);
            if *r >= x.rows() || *c >= x.cols() {
                return Err(Error::Dimension(format!("element ({r}, {c}) of {:?}", x.shape())));
            }
            Tensor::scalar(x.get(*r, *c))
        }
        Op::GatherRows(x, idx) => {
            let x = val(*x);
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            for &i in idx.iter() {
                if i >= x.rows() {
                    return Err(Error::Dimension(format!("row {i} of {:?}", x.shape())));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(idx.len(), x.cols(), data)?
        }
        Op::Sum(x) => Tensor::scalar(val(*x).data().iter().sum()),
        Op::ForwardCorrect(y, g) => {
            let (y, g) = (val(*y), val(*g));
            if y.cols() != 2 || g.cols() != 1 || y.rows() != g.rows() {
                return Err(Error::Dimension(format!(
                    "forward correction of {:?} by {:?}",
                    y.shape(),
                    g.shape()
                )));
            }
            let mut out = Tensor::zeros(y.rows(), 2);
            for v in 0..y.rows() {
                let (y0, y1, gamma) = (y.get(v, 0), y.get(v, 1), g.get(v, 0));
                out.set(v, 0, y0 + y1 * gamma);
                out.set(v, 1, y1 * (1.0 - gamma));
            }
            out
        }
    };
    if !out.is_finite() {
        return Err(Error::Numeric(format!("non-finite result from {}", op_name(op))));
    }
    Ok(out)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddRowBias(..) => "row bias",
        Op::ScaleBy(..) => "scale-by",
        Op::Scale(..) => "scale",
        Op::Aggregate(..) => "sparse aggregation",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::SoftmaxRows(_) => "softmax",
        Op::Log(_) => "log",
        Op::MeanRows(_) => "row mean",
        Op::ConcatCols(_) => "concat",
        Op::Element(..) => "element",
        Op::GatherRows(..) => "gather",
        Op::Sum(_) => "sum",
        Op::ForwardCorrect(..) => "forward correction",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) | Op::ScaleBy(a, b) => {
            vec![*a, *b]
        }
        Op::ForwardCorrect(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Aggregate(_, x)
        | Op::Relu(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::SoftmaxRows(x)
        | Op::Log(x)
        | Op::MeanRows(x)
        | Op::Element(x, ..)
        | Op::GatherRows(x, _)
        | Op::Sum(x) => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records a differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite input tensor".into()));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval(&op, &|v: Var| &nodes[v.0].value)?
        };
        let requires_grad = operands(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRowBias(m, bias))
    }

    /// Multiplies a matrix by a recorded `1 x 1` scalar.
    pub fn scale_by(&mut self, scalar: Var, m: Var) -> Result<Var> {
        self.record(Op::ScaleBy(scalar, m))
    }

    pub fn scale(&mut self, m: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(m, factor))
    }

    /// Row `v` of the result is `Σ_u w(v,u) · h_u`, summed in ascending `u`.
    pub fn aggregate(&mut self, weights: &Arc<CsrMatrix<f64>>, h: Var) -> Result<Var> {
        self.record(Op::Aggregate(Arc::clone(weights), h))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Log(x))
    }

    /// `N x d` to the `1 x d` mean row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanRows(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concatenation of nothing".into()));
        }
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn element(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        self.record(Op::Element(x, row, col))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &Arc<[usize]>) -> Result<Var> {
        self.record(Op::GatherRows(x, Arc::clone(rows)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    /// Row-wise product of an `N x 2` prediction with the per-row matrix
    /// `[[1, 0], [γ_v, 1 - γ_v]]`, where `gamma` is `N x 1`.
    pub fn forward_correct(&mut self, y: Var, gamma: Var) -> Result<Var> {
        self.record(Op::ForwardCorrect(y, gamma))
    }

    /// Re-evaluates every recorded operation from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, &|v: Var| &values[v.0])?,
            };
            values.push(value);
        }
        Ok(values)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_t(val(*b)));
                }
                if wants(*b) {
                    acc(*b, val(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, zip_map(g, bv, |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::AddRowBias(m, b) => {
                if wants(*m) {
                    acc(*m, g.clone());
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::ScaleBy(s, m) => {
                let (sv, mv) = (val(*s).data()[0], val(*m));
                if wants(*s) {
                    let dot: f64 = g.data().iter().zip(mv.data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::scalar(dot));
                }
                if wants(*m) {
                    acc(*m, g.map(|x| sv * x));
                }
            }
            Op::Scale(m, c) => {
                if wants(*m) {
                    acc(*m, g.map(|x| c * x));
                }
            }
            Op::Aggregate(w, h) => {
                if wants(*h) {
                    let hv = val(*h);
                    let mut gh = Tensor::zeros(hv.rows(), hv.cols());
                    for v in 0..w.rows() {
                        for (u, weight) in w.row(v) {
                            for (d, x) in gh.row_mut(u).iter_mut().zip(g.row(v)) {
                                *d += weight * x;
                            }
                        }
                    }
                    acc(*h, gh);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    acc(*x, zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    acc(*x, zip_map(g, out, |gv, y| gv * (1.0 - y * y)));
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    acc(*x, zip_map(g, out, |gv, y| gv * y * (1.0 - y)));
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let mut gx = Tensor::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    acc(*x, zip_map(g, val(*x), |gv, xv| gv / xv));
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let n = xv.rows() as f64;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for (d, gv) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *d = gv / n;
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    if wants(*p) {
                        let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + pv.cols()]);
                        }
                        acc(*p, gp);
                    }
                    offset += pv.cols();
                }
            }
            Op::Element(x, r, c) => {
                if wants(*x) {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    gx.set(*r, *c, g.data()[0]);
                    acc(*x, gx);
                }
            }
            Op::GatherRows(x, idx) => {
                if wants(*x) {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (d, gv) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    acc(*x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
            }
            Op::ForwardCorrect(y, gamma) => {
                let (yv, gv) = (val(*y), val(*gamma));
                if wants(*y) {
                    let mut gy = Tensor::zeros(yv.rows(), 2);
                    for v in 0..yv.rows() {
                        let (g0, g1, gam) = (g.get(v, 0), g.get(v, 1), gv.get(v, 0));
                        gy.set(v, 0, g0);
                        gy.set(v, 1, g0 * gam + g1 * (1.0 - gam));
                    }
                    acc(*y, gy);
                }
                if wants(*gamma) {
                    let mut gg = Tensor::zeros(yv.rows(), 1);
                    for v in 0..yv.rows() {
                        let y1 = yv.get(v, 1);
                        gg.set(v, 0, g.get(v, 0) * y1 - g.get(v, 1) * y1);
                    }
                    acc(*gamma, gg);
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("operands share a shape")
}

//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations on [`Var`]
//! handles append nodes; [`Var::backward`] replays them in reverse and
//! accumulates gradients into a [`Grads`] table.
//!
//! Shape errors and non-finite outputs do not panic. The first one is
//! recorded on the tape as a fault (carrying the op name) and surfaces from
//! [`Tape::check`] and [`Var::backward`].

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use super::tensor::{Tensor, NORM_EPS};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows(usize),
    RowNorms(usize),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
    Column(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Diag(usize),
    StopGrad,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::RowNorms(..) => "l2_norm",
            Op::SumCols(..) => "sum_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Column(..) => "column",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Diag(..) => "diag",
            Op::StopGrad => "stop_gradient",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug)]
enum Fault {
    NonFinite(&'static str),
    Shape(&'static str, String),
}

/// Ordered record of the operations of one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: RefCell<Option<Fault>>,
    /// Values substituted, in call order, for stop-gradient outputs.
    frozen: RefCell<std::vec::IntoIter<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_frozen_stop_gradients(Vec::new())
    }

    /// A tape whose `k`-th stop-gradient call outputs `frozen[k]` instead of
    /// its input, while any remain. Replaying the values recorded by
    /// [`stop_gradient_values`](Self::stop_gradient_values) turns every
    /// stop-gradient into a true constant.
    pub fn with_frozen_stop_gradients(frozen: Vec<Tensor<T>>) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: RefCell::new(None),
            frozen: RefCell::new(frozen.into_iter()),
        }
    }

    /// Outputs of every stop-gradient node, in call order.
    pub fn stop_gradient_values(&self) -> Vec<Tensor<T>> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    fn next_frozen(&self) -> Option<Tensor<T>> {
        self.frozen.borrow_mut().next()
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Returns the first recorded fault, if any.
    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            None => Ok(()),
            Some(Fault::NonFinite(op)) => Err(Error::NonFinite((*op).to_string())),
            Some(Fault::Shape(op, msg)) => Err(Error::shape(op, msg.clone())),
        }
    }

    fn record(&self, fault: Fault) {
        let mut slot = self.fault.borrow_mut();
        if slot.is_none() {
            *slot = Some(fault);
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        if !value.is_finite() {
            self.record(Fault::NonFinite(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn shape_fault(&self, op: &'static str, msg: String, rows: usize, cols: usize) -> Var<'_, T> {
        self.record(Fault::Shape(op, msg));
        self.push(Tensor::zeros(rows, cols), Op::Constant, false)
    }

    fn unary(&self, x: usize, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Var<'_, T> {
        let out = f(&self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, op, needs)
    }

    /// Hash of every discrete branch taken during the forward pass: relu
    /// input signs and gathered row indices. Two evaluations with equal
    /// signatures lie on the same smooth piece of a piecewise-smooth function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let nodes = self.nodes.borrow();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (id, node) in nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    id.hash(&mut h);
                    for &v in nodes[*x].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::GatherRows(_, idx) => {
                    id.hash(&mut h);
                    idx.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn backward_from(&self, root: usize) -> Result<Grads<T>> {
        self.check()?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", nodes[root].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::scalar(T::one()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let mut emit = |target: usize, delta: Tensor<T>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Constant | Op::StopGrad => {}
                Op::MatMul(a, b) => {
                    emit(*a, g.matmul_t(val(*b)));
                    emit(*b, val(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    emit(*a, g.matmul_unchecked(val(*b)));
                    emit(*b, g.t_matmul(val(*a)));
                }
                Op::Transpose(x) => emit(*x, g.transpose()),
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    emit(*a, g.zip_map(val(*b), |d, y| d * y));
                    emit(*b, g.zip_map(val(*a), |d, x| d * x));
                }
                Op::AddRow(x, bias) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (acc, &v) in db.data_mut().iter_mut().zip(r) {
                            *acc = *acc + v;
                        }
                    }
                    emit(*x, g.clone());
                    emit(*bias, db);
                }
                Op::MulCol(x, c) => {
                    let xs = val(*x);
                    let cs = val(*c);
                    let mut dx = g.clone();
                    let mut dc = Tensor::zeros(cs.rows(), 1);
                    for r in 0..g.rows() {
                        let scale = cs.get(r, 0);
                        let mut acc = T::zero();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            acc = acc + *d * xs.get(r, j);
                            *d = *d * scale;
                        }
                        dc.set(r, 0, acc);
                    }
                    emit(*x, dx);
                    emit(*c, dc);
                }
                Op::Scale(x, s) => emit(*x, g.map(|v| v * *s)),
                Op::Relu(x) => {
                    // Subgradient 0 at exactly 0.
                    emit(*x, g.zip_map(val(*x), |d, v| if v > T::zero() { d } else { T::zero() }));
                }
                Op::Sigmoid(x) => emit(*x, g.zip_map(&node.value, |d, y| d * y * (T::one() - y))),
                Op::Exp(x) => emit(*x, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(x) => emit(*x, g.zip_map(val(*x), |d, v| d / v)),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let inner: T = g.row(r).iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for (d, &p) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - inner);
                        }
                    }
                    emit(*x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let total: T = g.row(r).iter().copied().sum();
                        for (d, &ly) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = *d - ly.exp() * total;
                        }
                    }
                    emit(*x, dx);
                }
                Op::NormalizeRows(x) => {
                    let xs = val(*x);
                    let eps = T::lit(NORM_EPS);
                    let mut dx = g.clone();
                    for r in 0..xs.rows() {
                        let xr = xs.row(r);
                        let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let denom = n.max(eps);
                        let proj: T = xr.iter().zip(g.row(r)).map(|(&a, &d)| a * d).sum();
                        // Below the floor the norm is a constant.
                        let coef = if n > eps { proj / (n * n * n) } else { T::zero() };
                        for (d, &a) in dx.row_mut(r).iter_mut().zip(xr) {
                            *d = *d / denom - a * coef;
                        }
                    }
                    emit(*x, dx);
                }
                Op::RowNorms(x) => {
                    let xs = val(*x);
                    let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                    for r in 0..xs.rows() {
                        let n = node.value.get(r, 0);
                        if n > T::zero() {
                            let s = g.get(r, 0) / n;
                            for (d, &a) in dx.row_mut(r).iter_mut().zip(xs.row(r)) {
                                *d = a * s;
                            }
                        }
                    }
                    emit(*x, dx);
                }
                Op::SumCols(x) => {
                    let xs = val(*x);
                    let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                    for r in 0..xs.rows() {
                        let d = g.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|v| *v = d);
                    }
                    emit(*x, dx);
                }
                Op::Sum(x) => {
                    let xs = val(*x);
                    emit(*x, Tensor::filled(xs.rows(), xs.cols(), g.item()));
                }
                Op::Mean(x) => {
                    let xs = val(*x);
                    let n = T::from_usize_lossy(xs.len().max(1));
                    emit(*x, Tensor::filled(xs.rows(), xs.cols(), g.item() / n));
                }
                Op::Column(x, j) => {
                    let xs = val(*x);
                    let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                    for r in 0..xs.rows() {
                        dx.set(r, *j, g.get(r, 0));
                    }
                    emit(*x, dx);
                }
                Op::SliceCols(x, start) => {
                    let xs = val(*x);
                    let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                    let w = g.cols();
                    for r in 0..xs.rows() {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    emit(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        emit(p, dp);
                    }
                }
                Op::GatherRows(table, idx) => {
                    let ts = val(*table);
                    let mut dt = Tensor::zeros(ts.rows(), ts.cols());
                    for (r, &k) in idx.iter().enumerate() {
                        for (acc, &d) in dt.row_mut(k).iter_mut().zip(g.row(r)) {
                            *acc = *acc + d;
                        }
                    }
                    emit(*table, dt);
                }
                Op::Diag(x) => {
                    let xs = val(*x);
                    let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                    for r in 0..xs.rows() {
                        dx.set(r, r, g.get(r, 0));
                    }
                    emit(*x, dx);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// feed the loss through a differentiable path.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns a zero tensor of the right shape
    /// for unreachable vars.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let v = var.value();
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn backward(&self) -> Result<Grads<T>> {
        self.tape.backward_from(self.id)
    }

    fn binary_same_shape(
        self,
        other: Self,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Var<'t, T> {
        let tape = self.tape;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return tape.shape_fault(op.name(), format!("{sa:?} vs {sb:?}"), sa[0], sa[1]);
        }
        let out = self.value().zip_map(&other.value(), f);
        let needs = tape.needs(&[self.id, other.id]);
        tape.push(out, op, needs)
    }

    pub fn matmul(self, other: Self) -> Var<'t, T> {
        let tape = self.tape;
        let (sa, sb) = (self.shape(), other.shape());
        if sa[1] != sb[0] {
            return tape.shape_fault("matmul", format!("{sa:?} times {sb:?}"), sa[0], sb[1]);
        }
        let out = self.value().matmul_unchecked(&other.value());
        let needs = tape.needs(&[self.id, other.id]);
        tape.push(out, Op::MatMul(self.id, other.id), needs)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Self) -> Var<'t, T> {
        let tape = self.tape;
        let (sa, sb) = (self.shape(), other.shape());
        if sa[1] != sb[1] {
            return tape.shape_fault("matmul_t", format!("{sa:?} times {sb:?}ᵀ"), sa[0], sb[0]);
        }
        let out = self.value().matmul_t(&other.value());
        let needs = tape.needs(&[self.id, other.id]);
        tape.push(out, Op::MatMulT(self.id, other.id), needs)
    }

    pub fn transpose(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Transpose(self.id), Tensor::transpose)
    }

    /// Adds a `1 × n` row to every row of `self`.
    pub fn add_row(self, bias: Self) -> Var<'t, T> {
        let tape = self.tape;
        let (sx, sb) = (self.shape(), bias.shape());
        if sb != [1, sx[1]] {
            return tape.shape_fault("add_row", format!("{sx:?} + row {sb:?}"), sx[0], sx[1]);
        }
        let mut out = self.to_tensor();
        {
            let b = bias.value();
            for r in 0..sx[0] {
                for (o, &v) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o = *o + v;
                }
            }
        }
        let needs = tape.needs(&[self.id, bias.id]);
        tape.push(out, Op::AddRow(self.id, bias.id), needs)
    }

    /// Multiplies row `r` of `self` by entry `r` of the `B × 1` column `scale`.
    pub fn mul_col(self, scale: Self) -> Var<'t, T> {
        let tape = self.tape;
        let (sx, sc) = (self.shape(), scale.shape());
        if sc != [sx[0], 1] {
            return tape.shape_fault("mul_col", format!("{sx:?} * col {sc:?}"), sx[0], sx[1]);
        }
        let mut out = self.to_tensor();
        {
            let c = scale.value();
            for r in 0..sx[0] {
                let s = c.get(r, 0);
                out.row_mut(r).iter_mut().for_each(|v| *v = *v * s);
            }
        }
        let needs = tape.needs(&[self.id, scale.id]);
        tape.push(out, Op::MulCol(self.id, scale.id), needs)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Scale(self.id, s), |x| x.map(|v| v * s))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Relu(self.id), |x| {
            x.map(|v| if v > T::zero() { v } else { T::zero() })
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |x| x.map(sigmoid))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Exp(self.id), |x| x.map(T::exp))
    }

    pub fn log(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Log(self.id), |x| x.map(T::ln))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::SoftmaxRows(self.id), |x| {
            let mut out = x.clone();
            for r in 0..x.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::LogSoftmaxRows(self.id), |x| {
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v = *v - lse);
            }
            out
        })
    }

    /// Divides each row by its L2 norm, floored at [`NORM_EPS`].
    pub fn normalize_rows(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::NormalizeRows(self.id), |x| {
            let eps = T::lit(NORM_EPS);
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v = *v / n);
            }
            out
        })
    }

    /// L2 norm of each row, as a `B × 1` column.
    pub fn l2_norm(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::RowNorms(self.id), |x| {
            let norms: Vec<T> = x.iter_rows().map(super::tensor::l2_norm).collect();
            Tensor::column_vector(&norms)
        })
    }

    /// Row-wise cosine similarity of two equal-shape matrices, as `B × 1`.
    pub fn cosine_sim(self, other: Self) -> Var<'t, T> {
        (self.normalize_rows() * other.normalize_rows()).sum_cols()
    }

    /// Sum of each row, as a `B × 1` column.
    pub fn sum_cols(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::SumCols(self.id), |x| {
            let sums: Vec<T> = x.iter_rows().map(|r| r.iter().copied().sum()).collect();
            Tensor::column_vector(&sums)
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Sum(self.id), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Mean(self.id), |x| {
            Tensor::scalar(x.sum() / T::from_usize_lossy(x.len().max(1)))
        })
    }

    /// Column `j` as a `B × 1` tensor.
    pub fn column(self, j: usize) -> Var<'t, T> {
        let [rows, cols] = self.shape();
        if j >= cols {
            return self
                .tape
                .shape_fault("column", format!("column {j} of {cols}"), rows, 1);
        }
        self.tape.unary(self.id, Op::Column(self.id, j), |x| {
            let col: Vec<T> = (0..rows).map(|r| x.get(r, j)).collect();
            Tensor::column_vector(&col)
        })
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(self, start: usize, width: usize) -> Var<'t, T> {
        let [rows, cols] = self.shape();
        if start + width > cols {
            return self.tape.shape_fault(
                "slice_cols",
                format!("{start}..{} of {cols}", start + width),
                rows,
                width,
            );
        }
        self.tape.unary(self.id, Op::SliceCols(self.id, start), |x| {
            let mut out = Tensor::zeros(rows, width);
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(&x.row(r)[start..start + width]);
            }
            out
        })
    }

    /// Rows of `self` (a lookup table) selected by `indices`.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t, T> {
        let [rows, cols] = self.shape();
        if let Some(&bad) = indices.iter().find(|&&k| k >= rows) {
            return self.tape.shape_fault(
                "gather_rows",
                format!("index {bad} out of {rows} rows"),
                indices.len(),
                cols,
            );
        }
        let out = {
            let table = self.value();
            let mut out = Tensor::zeros(indices.len(), cols);
            for (r, &k) in indices.iter().enumerate() {
                out.row_mut(r).copy_from_slice(table.row(k));
            }
            out
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push(out, Op::GatherRows(self.id, indices.to_vec()), needs)
    }

    /// Diagonal of a square matrix as a `B × 1` column.
    pub fn diag(self) -> Var<'t, T> {
        let [rows, cols] = self.shape();
        if rows != cols {
            return self
                .tape
                .shape_fault("diag", format!("non-square {rows}x{cols}"), rows, 1);
        }
        self.tape.unary(self.id, Op::Diag(self.id), |x| {
            let d: Vec<T> = (0..rows).map(|r| x.get(r, r)).collect();
            Tensor::column_vector(&d)
        })
    }

    /// Forward identity, backward zero.
    pub fn stop_gradient(self) -> Var<'t, T> {
        let out = match self.tape.next_frozen() {
            Some(frozen) if frozen.shape() == self.shape() => frozen,
            Some(frozen) => {
                let msg = format!("frozen value {:?} for input {:?}", frozen.shape(), self.shape());
                let [rows, cols] = self.shape();
                return self.tape.shape_fault("stop_gradient", msg, rows, cols);
            }
            None => self.to_tensor(),
        };
        self.tape.push(out, Op::StopGrad, false)
    }
}

/// Concatenates equal-height vars along columns.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    let tape = parts[0].tape;
    let rows = parts[0].rows();
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let total: usize = widths.iter().sum();
    if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
        return tape.shape_fault(
            "concat_cols",
            format!("row count {} vs {rows}", p.rows()),
            rows,
            total,
        );
    }
    let mut out = Tensor::zeros(rows, total);
    for r in 0..rows {
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            out.row_mut(r)[offset..offset + w].copy_from_slice(p.value().row(r));
            offset += w;
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    tape.push(out, Op::ConcatCols(ids), needs)
}

/// Sums a non-empty list of equal-shape vars.
pub fn sum_vars<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    let mut it = parts.iter().copied();
    let first = it.next().expect("sum_vars needs at least one term");
    it.fold(first, |acc, v| acc + v)
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary_same_shape(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary_same_shape(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary_same_shape(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.scale(-T::one())
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so node operands always precede the node itself. [`Tape::backward`]
//! walks the record once in reverse. Model code is written against the
//! [`Value`] trait so the same forward pass runs eagerly on plain tensors
//! (inference) or recorded on a tape (training).

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_t, Tensor};

/// Operations shared by eager tensors and taped variables.
pub trait Value: Clone + Sized {
    fn shape(&self) -> Vec<usize>;
    /// Wraps a constant so it can be combined with `self`.
    fn constant(&self, t: Tensor) -> Self;
    fn to_tensor(&self) -> Tensor;

    fn matmul(&self, rhs: &Self) -> Result<Self>;
    fn add(&self, rhs: &Self) -> Result<Self>;
    fn sub(&self, rhs: &Self) -> Result<Self>;
    fn mul(&self, rhs: &Self) -> Result<Self>;
    fn div(&self, rhs: &Self) -> Result<Self>;
    fn add_row(&self, row: &Self) -> Result<Self>;
    fn mul_const(&self, c: &Arc<Tensor>) -> Result<Self>;
    fn scale(&self, c: f64) -> Self;
    fn add_scalar(&self, c: f64) -> Self;
    fn tanh(&self) -> Self;
    fn exp(&self) -> Self;
    fn log(&self) -> Result<Self>;
    fn neg(&self) -> Self;
    fn square(&self) -> Self;
    fn sum(&self) -> Self;
    fn sum_rows(&self) -> Result<Self>;
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self>;
    fn flip_cols(&self) -> Result<Self>;
    fn concat_cols(&self, rhs: &Self) -> Result<Self>;
}

impl Value for Tensor {
    fn shape(&self) -> Vec<usize> {
        Tensor::shape(self).to_vec()
    }
    fn constant(&self, t: Tensor) -> Self {
        t
    }
    fn to_tensor(&self) -> Tensor {
        self.clone()
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Tensor::matmul(self, rhs)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        Tensor::add(self, rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        Tensor::sub(self, rhs)
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        Tensor::mul(self, rhs)
    }
    fn div(&self, rhs: &Self) -> Result<Self> {
        Tensor::div(self, rhs)
    }
    fn add_row(&self, row: &Self) -> Result<Self> {
        Tensor::add_row(self, row)
    }
    fn mul_const(&self, c: &Arc<Tensor>) -> Result<Self> {
        Tensor::mul(self, c)
    }
    fn scale(&self, c: f64) -> Self {
        Tensor::scale(self, c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }
    fn tanh(&self) -> Self {
        Tensor::tanh(self)
    }
    fn exp(&self) -> Self {
        Tensor::exp(self)
    }
    fn log(&self) -> Result<Self> {
        Tensor::log(self)
    }
    fn neg(&self) -> Self {
        Tensor::neg(self)
    }
    fn square(&self) -> Self {
        self.map(|v| v * v)
    }
    fn sum(&self) -> Self {
        Tensor::scalar(Tensor::sum(self))
    }
    fn sum_rows(&self) -> Result<Self> {
        Tensor::sum_rows(self)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        Tensor::slice_cols(self, start, end)
    }
    fn flip_cols(&self) -> Result<Self> {
        Tensor::flip_cols(self)
    }
    fn concat_cols(&self, rhs: &Self) -> Result<Self> {
        Tensor::concat_cols(self, rhs)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulConst(usize, Arc<Tensor>),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Square(usize),
    Sum(usize),
    SumRows(usize),
    SliceCols(usize, usize, usize),
    FlipCols(usize),
    ConcatCols(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    /// Whether any leaf is upstream of this node.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// reach the loss.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
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

    /// Registers a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            let needs = |i: usize| nodes[i].needs_grad;
            let mut out: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        out.push((*a, matmul_t(&g, false, val(*b), true)?));
                    }
                    if needs(*b) {
                        out.push((*b, matmul_t(val(*a), true, &g, false)?));
                    }
                }
                Op::Add(a, b) => {
                    out.push((*b, g.clone()));
                    out.push((*a, g));
                }
                Op::Sub(a, b) => {
                    out.push((*b, g.neg()));
                    out.push((*a, g));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        out.push((*a, g.mul(val(*b))?));
                    }
                    if needs(*b) {
                        out.push((*b, g.mul(val(*a))?));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if needs(*a) {
                        out.push((*a, g.zip_with(bv, "div", |g, b| g / b)?));
                    }
                    if needs(*b) {
                        // d(a/b)/db = -out/b
                        let t = node.value.zip_with(bv, "div", |o, b| -o / b)?;
                        out.push((*b, g.mul(&t)?));
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(*row) {
                        out.push((*row, g.sum_cols()?));
                    }
                    out.push((*a, g));
                }
                Op::MulConst(a, c) => out.push((*a, g.mul(c)?)),
                Op::Scale(a, c) => out.push((*a, g.scale(*c))),
                Op::AddScalar(a) => out.push((*a, g)),
                Op::Tanh(a) => {
                    let d = g.zip_with(&node.value, "tanh", |g, y| g * (1.0 - y * y))?;
                    out.push((*a, d));
                }
                Op::Exp(a) => out.push((*a, g.mul(&node.value)?)),
                Op::Log(a) => out.push((*a, g.zip_with(val(*a), "log", |g, x| g / x)?)),
                Op::Neg(a) => out.push((*a, g.neg())),
                Op::Square(a) => {
                    out.push((*a, g.zip_with(val(*a), "square", |g, x| 2.0 * g * x)?))
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    out.push((*a, Tensor::full(val(*a).shape(), s)));
                }
                Op::SumRows(a) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    for (i, r) in d.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
                        r.fill(g.data()[i]);
                    }
                    out.push((*a, d));
                }
                Op::SliceCols(a, start, end) => {
                    let av = val(*a);
                    let mut d = Tensor::zeros(av.shape());
                    for i in 0..av.rows() {
                        d.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                    }
                    out.push((*a, d));
                }
                Op::FlipCols(a) => out.push((*a, g.flip_cols()?)),
                Op::ConcatCols(a, b) => {
                    let split = val(*a).cols();
                    if needs(*a) {
                        out.push((*a, g.slice_cols(0, split)?));
                    }
                    if needs(*b) {
                        out.push((*b, g.slice_cols(split, g.cols())?));
                    }
                }
            }
            for (target, grad) in out {
                if !needs(target) {
                    continue;
                }
                let grad = reduce_to(grad, nodes[target].value.shape());
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Sums a broadcast gradient back down to a single-element operand.
fn reduce_to(grad: Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if grad.len() == n {
        if grad.shape() == shape {
            grad
        } else {
            grad.reshape(shape.to_vec()).expect("same element count")
        }
    } else {
        Tensor::full(shape, grad.sum())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Self {
        self.tape.push(value, op, self.tape.needs(self.id))
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Self {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }
}

impl<'t> Value for Var<'t> {
    fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }
    fn constant(&self, t: Tensor) -> Self {
        self.tape.constant(t)
    }
    fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::MatMul(self.id, rhs.id)))
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = self.value().add(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::Add(self.id, rhs.id)))
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = self.value().sub(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::Sub(self.id, rhs.id)))
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = self.value().mul(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::Mul(self.id, rhs.id)))
    }
    fn div(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = self.value().div(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::Div(self.id, rhs.id)))
    }
    fn add_row(&self, row: &Self) -> Result<Self> {
        self.same_tape(row)?;
        let v = self.value().add_row(&row.value())?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }
    fn mul_const(&self, c: &Arc<Tensor>) -> Result<Self> {
        let v = self.value().mul(c)?;
        Ok(self.unary(v, Op::MulConst(self.id, Arc::clone(c))))
    }
    fn scale(&self, c: f64) -> Self {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }
    fn add_scalar(&self, c: f64) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }
    fn tanh(&self) -> Self {
        let v = self.value().tanh();
        self.unary(v, Op::Tanh(self.id))
    }
    fn exp(&self) -> Self {
        let v = self.value().exp();
        self.unary(v, Op::Exp(self.id))
    }
    fn log(&self) -> Result<Self> {
        let v = self.value().log()?;
        Ok(self.unary(v, Op::Log(self.id)))
    }
    fn neg(&self) -> Self {
        let v = self.value().neg();
        self.unary(v, Op::Neg(self.id))
    }
    fn square(&self) -> Self {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }
    fn sum(&self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }
    fn sum_rows(&self) -> Result<Self> {
        let v = self.value().sum_rows()?;
        Ok(self.unary(v, Op::SumRows(self.id)))
    }
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let v = self.value().slice_cols(start, end)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start, end)))
    }
    fn flip_cols(&self) -> Result<Self> {
        let v = self.value().flip_cols()?;
        Ok(self.unary(v, Op::FlipCols(self.id)))
    }
    fn concat_cols(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = self.value().concat_cols(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::ConcatCols(self.id, rhs.id)))
    }
}

//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output replays the tape in reverse and
//! returns the adjoint of every node. Tapes are built fresh for each
//! objective evaluation and dropped afterwards.
//!
//! Elementwise binary primitives accept operands of equal shape, or one
//! operand whose shape equals the other's with the leading (batch) axis
//! removed; the smaller operand is broadcast over that axis. Any other
//! combination panics with both shapes named.
//!
//! ```
//! use dmm_core::autodiff::Tape;
//! use dmm_core::Tensor;
//!
//! let tape = Tape::new();
//! let w = tape.param("w", Tensor::vector(vec![1.0, -2.0]));
//! let loss = w.square().sum();
//! let grads = tape.gradient(loss, &["w"]).unwrap();
//! assert_eq!(grads["w"].data(), &[2.0, -4.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Reverse rule attached to a node. Operand fields are node indices, which
/// are always smaller than the index of the node holding the rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Sin(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Mean(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
}

impl Op {
    pub fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a, _) | Exp(a) | Log(a) | Square(a) | Sqrt(a) | Tanh(a)
            | Sigmoid(a) | Relu(a) | Softplus(a) | Sin(a) | Sum(a) | SumAxis(a, _) | Mean(a)
            | Slice(a, _, _) => vec![*a],
            Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("params", &self.params.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.get_index(v.idx)
    }

    fn get_index(&self, idx: usize) -> Tensor {
        match &self.grads[idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[idx]),
        }
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Unnamed leaf (differentiable input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Leaf whose adjoint is never requested.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Named parameter leaf. Registering the same name twice panics.
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        let v = self.push(value, Op::Leaf);
        let prev = self.params.borrow_mut().insert(name.to_string(), v.idx);
        assert!(prev.is_none(), "parameter `{name}` bound twice on one tape");
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var<'_>> {
        self.params
            .borrow()
            .get(name)
            .map(|&idx| Var { tape: self, idx })
    }

    /// Concatenates along the last axis. All inputs must agree on every
    /// other axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].idx].value.shape().to_vec();
            let lead = &first[..first.len() - 1];
            let rows: usize = lead.iter().product();
            let mut cols = 0;
            for p in parts {
                let s = nodes[p.idx].value.shape();
                if &s[..s.len() - 1] != lead {
                    panic!("shape mismatch in concat: {:?} vs {:?}", first, s);
                }
                cols += s[s.len() - 1];
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let t = &nodes[p.idx].value;
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(cols);
            Tensor::new(shape, data)
        };
        self.push(value, Op::Concat(parts.iter().map(|p| p.idx).collect()))
    }

    /// Reverse pass from a scalar-shaped output.
    pub fn backward(&self, output: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.idx].value;
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "gradient requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Tensor::new(out.shape().to_vec(), vec![1.0]));
        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = nodes[..=output.idx]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Grads { grads, shapes })
    }

    /// Gradients of `output` with respect to the named parameters.
    /// Parameters bound on the tape but not reachable from `output` get a
    /// zero tensor; names never bound are an error.
    pub fn gradient(&self, output: Var<'_>, leaves: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(output)?;
        let params = self.params.borrow();
        let nodes = self.nodes.borrow();
        let mut out = BTreeMap::new();
        for &name in leaves {
            let &idx = params
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            let g = if idx < grads.grads.len() {
                grads.get_index(idx)
            } else {
                Tensor::zeros(nodes[idx].value.shape())
            };
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }

    /// Gradients for every parameter bound on the tape.
    pub fn gradient_all(&self, output: Var<'_>) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<String> = self.params.borrow().keys().cloned().collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.gradient(output, &refs)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Bcast {
    Same,
    /// rhs is broadcast over the leading axis of lhs
    Rhs,
    /// lhs is broadcast over the leading axis of rhs
    Lhs,
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Bcast {
    if a == b {
        Bcast::Same
    } else if !a.is_empty() && &a[1..] == b {
        Bcast::Rhs
    } else if !b.is_empty() && &b[1..] == a {
        Bcast::Lhs
    } else {
        panic!(
            "{}",
            Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec()
            }
        )
    }
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match bcast_kind(op, a.shape(), b.shape()) {
        Bcast::Same => a.zip_map(b, f),
        Bcast::Rhs => {
            let inner = b.len().max(1);
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % inner]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Bcast::Lhs => {
            let inner = a.len().max(1);
            let data = b
                .data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.data()[i % inner], y))
                .collect();
            Tensor::new(b.shape().to_vec(), data)
        }
    }
}

/// Sums a full-size gradient down to `shape` (undoing leading-axis broadcast).
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let inner: usize = shape.iter().product();
    let mut out = vec![0.0; inner];
    for (i, v) in g.data().iter().enumerate() {
        out[i % inner] += v;
    }
    Tensor::new(shape.to_vec(), out)
}

/// Expands `small` along the leading axis to `shape` when needed.
fn expand_to(small: &Tensor, shape: &[usize]) -> Tensor {
    if small.shape() == shape {
        return small.clone();
    }
    let n: usize = shape.iter().product();
    let inner = small.len();
    Tensor::new(shape.to_vec(), (0..n).map(|i| small.data()[i % inner]).collect())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[idx].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            // dA = G B^T, dB = A^T G
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, (g.data(), n as isize, 1), (tb.data(), 1, n as isize), &mut ga, 0.0);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, (ta.data(), 1, k as isize), (g.data(), n as isize, 1), &mut gb, 0.0);
            accumulate(grads, a, Tensor::new(vec![m, k], ga));
            accumulate(grads, b, Tensor::new(vec![k, n], gb));
        }
        &Op::Add(a, b) => {
            accumulate(grads, a, reduce_to(g.clone(), val(a).shape()));
            accumulate(grads, b, reduce_to(g.clone(), val(b).shape()));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, a, reduce_to(g.clone(), val(a).shape()));
            accumulate(grads, b, reduce_to(g.map(|v| -v), val(b).shape()));
        }
        &Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let ga = g.zip_map(&expand_to(tb, g.shape()), |g, y| g * y);
            let gb = g.zip_map(&expand_to(ta, g.shape()), |g, x| g * x);
            accumulate(grads, a, reduce_to(ga, ta.shape()));
            accumulate(grads, b, reduce_to(gb, tb.shape()));
        }
        &Op::Div(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let eb = expand_to(tb, g.shape());
            let ga = g.zip_map(&eb, |g, y| g / y);
            // d(x/y)/dy = -out / y
            let gb = ga.zip_map(out, |gy, o| -gy * o);
            accumulate(grads, a, reduce_to(ga, ta.shape()));
            accumulate(grads, b, reduce_to(gb, tb.shape()));
        }
        &Op::Scale(a, s) => accumulate(grads, a, g.map(|v| v * s)),
        &Op::AddScalar(a, _) => accumulate(grads, a, g.clone()),
        &Op::Exp(a) => accumulate(grads, a, g.zip_map(out, |g, o| g * o)),
        &Op::Log(a) => accumulate(grads, a, g.zip_map(val(a), |g, x| g / x)),
        &Op::Square(a) => accumulate(grads, a, g.zip_map(val(a), |g, x| 2.0 * g * x)),
        &Op::Sqrt(a) => accumulate(grads, a, g.zip_map(out, |g, o| 0.5 * g / o)),
        &Op::Tanh(a) => accumulate(grads, a, g.zip_map(out, |g, o| g * (1.0 - o * o))),
        &Op::Sigmoid(a) => accumulate(grads, a, g.zip_map(out, |g, o| g * o * (1.0 - o))),
        &Op::Relu(a) => accumulate(
            grads,
            a,
            g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        &Op::Softplus(a) => accumulate(grads, a, g.zip_map(val(a), |g, x| g * sigmoid(x))),
        &Op::Sin(a) => accumulate(grads, a, g.zip_map(val(a), |g, x| g * x.cos())),
        &Op::Sum(a) => {
            let ta = val(a);
            accumulate(grads, a, Tensor::full(ta.shape(), g.item()));
        }
        &Op::Mean(a) => {
            let ta = val(a);
            accumulate(grads, a, Tensor::full(ta.shape(), g.item() / ta.len() as f64));
        }
        &Op::SumAxis(a, axis) => {
            let ta = val(a);
            let (outer, len, inner) = axis_split(ta.shape(), axis);
            let mut ga = vec![0.0; ta.len()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        ga[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            accumulate(grads, a, Tensor::new(ta.shape().to_vec(), ga));
        }
        Op::Concat(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let tp = val(p);
                let c = tp.cols();
                let mut gp = Vec::with_capacity(tp.len());
                for r in 0..rows {
                    gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                }
                accumulate(grads, p, Tensor::new(tp.shape().to_vec(), gp));
                offset += c;
            }
        }
        &Op::Slice(a, start, end) => {
            let ta = val(a);
            let c = ta.cols();
            let w = end - start;
            let mut ga = vec![0.0; ta.len()];
            for r in 0..ta.rows() {
                ga[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            accumulate(grads, a, Tensor::new(ta.shape().to_vec(), ga));
        }
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn op(&self) -> Op {
        self.tape.nodes.borrow()[self.idx].op.clone()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.map(f);
        self.tape.push(v, op(self.idx))
    }

    fn binary_op(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let nodes = self.tape.nodes.borrow();
            binary(&nodes[self.idx].value, &nodes[other.idx].value, name, f)
        };
        self.tape.push(v, op(self.idx, other.idx))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[other.idx].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                panic!(
                    "{}",
                    Error::Shape {
                        op: "matmul",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec()
                    }
                );
            }
            a.matmul(b)
        };
        self.tape.push(v, Op::MatMul(self.idx, other.idx))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary_op(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary_op(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary_op(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary_op(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.map(|x| x * s);
        self.tape.push(v, Op::Scale(self.idx, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.map(|x| x + s);
        self.tape.push(v, Op::AddScalar(self.idx, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `s - self`
    pub fn rsub_scalar(self, s: f64) -> Var<'t> {
        self.neg().add_scalar(s)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    /// `log(1 + e^x)` in the form `max(x, 0) + log1p(e^-|x|)`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.nodes.borrow()[self.idx].value.sum());
        self.tape.push(v, Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            Tensor::scalar(t.sum() / t.len() as f64)
        };
        self.tape.push(v, Op::Mean(self.idx))
    }

    /// Sums out `axis`; the result drops that axis (rank-0 results become `[1]`).
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            assert!(axis < t.rank(), "sum_axis({axis}) on shape {:?}", t.shape());
            let (outer, len, inner) = axis_split(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, out)
        };
        self.tape.push(v, Op::SumAxis(self.idx, axis))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(self, start: usize, end: usize) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.idx].value;
            let c = t.cols();
            assert!(
                start < end && end <= c,
                "slice {start}..{end} out of range for shape {:?}",
                t.shape()
            );
            let mut data = Vec::with_capacity(t.rows() * (end - start));
            for r in 0..t.rows() {
                data.extend_from_slice(&t.data()[r * c + start..r * c + end]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            Tensor::new(shape, data)
        };
        self.tape.push(v, Op::Slice(self.idx, start, end))
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$call(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

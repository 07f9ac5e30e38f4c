//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order. Because parents are always recorded before children the
//! tape is already topologically sorted, and [`Tape::backward`] simply walks
//! it in reverse.
//!
//! Tapes are meant to be short-lived: build one per training step, run the
//! forward pass, call `backward`, read the leaf gradients, drop it.
//!
//! ```
//! use pkan_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let y = x.mul(x).unwrap().sum().unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(x.grad().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::special;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: operand {operand} has value {value} at element {index}, outside the domain")]
    Domain {
        op: &'static str,
        operand: usize,
        index: usize,
        value: f64,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("clamp bounds are inverted: {lo} > {hi}")]
    InvalidBounds { lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor. An empty shape denotes a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(AutodiffError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { index, value });
        }
        Self::new(shape, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() || self.shape == [1]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Backward rule for operations defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one gradient buffer per
/// input (same length as that input).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Log1p,
    Sqrt,
    Square,
    Sin,
    Sigmoid,
    Silu,
    Softplus,
    Lgamma,
    Atan,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Log1p => "log1p",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Sin => "sin",
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Lgamma => "lgamma",
            Unary::Atan => "atan",
        }
    }

    fn in_domain(self, x: f64) -> bool {
        match self {
            Unary::Log | Unary::Lgamma => x > 0.0,
            Unary::Log1p => x > -1.0,
            Unary::Sqrt => x >= 0.0,
            _ => true,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Log1p => x.ln_1p(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Sin => x.sin(),
            Unary::Sigmoid => special::sigmoid(x),
            Unary::Silu => special::silu(x),
            Unary::Softplus => special::softplus(x),
            Unary::Lgamma => special::lgamma(x),
            Unary::Atan => x.atan(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Log1p => 1.0 / (1.0 + x),
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Sin => x.cos(),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = special::sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Softplus => special::sigmoid(x),
            Unary::Lgamma => special::digamma(x),
            Unary::Atan => 1.0 / (1.0 + x * x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Affine { parent: usize, scale: f64 },
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Clamp { parent: usize, lo: f64, hi: f64 },
    /// Broadcast, reshape and transpose all route gradients through an index map.
    Broadcast(usize),
    Reshape(usize),
    Transpose(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of a computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
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
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records an input. Parameters and constants are both leaves.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    /// Records an externally computed result together with its backward rule.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let parents = inputs.iter().map(|v| v.id).collect();
        self.push(output, Op::Custom(parents, op))
    }

    /// Accumulates `∂root/∂node` into every node reachable from `root`.
    ///
    /// Gradients are summed with whatever a previous call left behind; use
    /// [`Tape::zero_gradients`] to reset.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_value.shape.clone()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        adjoints[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut adjoints);
            adjoints[id] = Some(g);
        }
        drop(nodes);

        let mut grads = self.grads.borrow_mut();
        for (id, adj) in adjoints.into_iter().enumerate() {
            if let Some(adj) = adj {
                match &mut grads[id] {
                    Some(acc) => acc.iter_mut().zip(&adj).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(adj),
                }
            }
        }
        Ok(())
    }

    pub fn zero_gradients(&self, vars: &[Var<'_>]) {
        let mut grads = self.grads.borrow_mut();
        for v in vars {
            grads[v.id] = None;
        }
    }

    fn unary<'t>(&'t self, kind: Unary, x: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value_of(x.id);
        if let Some((index, &value)) = xv.data.iter().enumerate().find(|(_, &v)| !kind.in_domain(v)) {
            return Err(AutodiffError::Domain {
                op: kind.name(),
                operand: 0,
                index,
                value,
            });
        }
        let data = xv.data.iter().map(|&v| kind.eval(v)).collect();
        Ok(self.push(
            Tensor {
                shape: xv.shape.clone(),
                data,
            },
            Op::Unary(kind, x.id),
        ))
    }

    fn binary<'t>(&'t self, kind: Binary, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value_of(a.id), self.value_of(b.id));
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        if kind == Binary::Div {
            if let Some((index, &value)) = bv.data.iter().enumerate().find(|(_, &v)| v == 0.0) {
                return Err(AutodiffError::Domain {
                    op: op_name,
                    operand: 1,
                    index,
                    value,
                });
            }
        }
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out = if av.shape == bv.shape {
            let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor {
                shape: av.shape.clone(),
                data,
            }
        } else {
            let shape = broadcast_shape(&av.shape, &bv.shape).ok_or_else(|| AutodiffError::ShapeMismatch {
                op: op_name,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            })?;
            let ia = broadcast_index(&shape, &av.shape);
            let ib = broadcast_index(&shape, &bv.shape);
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(av.data[i], bv.data[j])).collect();
            Tensor { shape, data }
        };
        Ok(self.push(out, Op::Binary(kind, a.id, b.id)))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    /// Accumulated gradient; zeros if `backward` never reached this node.
    pub fn grad(&self) -> Tensor {
        let shape = self.shape();
        match &self.tape.grads.borrow()[self.id] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Add, self, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Sub, self, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Mul, self, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(Binary::Div, self, other)
    }

    /// `scale * self + shift` with constant coefficients.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data.iter().map(|x| scale * x + shift).collect();
        self.tape.push(
            Tensor {
                shape: v.shape.clone(),
                data,
            },
            Op::Affine {
                parent: self.id,
                scale,
            },
        )
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out, false);
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(self.id, other.id),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let v = self.value();
        Ok(self.tape.push(Tensor::scalar(v.data.iter().sum()), Op::Sum(self.id)))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean",
                lhs: v.shape.clone(),
                rhs: Vec::new(),
            });
        }
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        Ok(self.tape.push(Tensor::scalar(m), Op::Mean(self.id)))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Exp, self)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Log, self)
    }

    pub fn log1p(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Log1p, self)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Sqrt, self)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Square, self)
    }

    pub fn sin(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Sin, self)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Sigmoid, self)
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Silu, self)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Softplus, self)
    }

    /// `ln Γ(x)`, defined here for `x > 0`.
    pub fn lgamma(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Lgamma, self)
    }

    pub fn atan(self) -> Result<Var<'t>> {
        self.tape.unary(Unary::Atan, self)
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient is 1 on the closed interval
    /// and 0 outside it.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(AutodiffError::InvalidBounds { lo, hi });
        }
        let v = self.value();
        let data = v.data.iter().map(|x| x.clamp(lo, hi)).collect();
        Ok(self.tape.push(
            Tensor {
                shape: v.shape.clone(),
                data,
            },
            Op::Clamp {
                parent: self.id,
                lo,
                hi,
            },
        ))
    }

    /// Explicit broadcast to `shape` under numpy rules.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        match broadcast_shape(&v.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast",
                    lhs: v.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let data = broadcast_index(shape, &v.shape).into_iter().map(|i| v.data[i]).collect();
        Ok(self.tape.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Broadcast(self.id),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(
            Tensor {
                shape: shape.to_vec(),
                data: v.data.clone(),
            },
            Op::Reshape(self.id),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: v.shape.clone(),
                rhs: Vec::new(),
            });
        }
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data[i * c + j];
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(self.id),
        ))
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: impl IntoIterator<Item = f64>, len: usize) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

/// Sum `grad` (laid out over `out_shape`) back down to `target` shape.
fn reduce_broadcast(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; target.iter().product()];
    for (g, i) in grad.iter().zip(broadcast_index(out_shape, target)) {
        acc[i] += g;
    }
    acc
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let same = av.shape == bv.shape;
            let ia = (!same).then(|| broadcast_index(&out.shape, &av.shape));
            let ib = (!same).then(|| broadcast_index(&out.shape, &bv.shape));
            let at = |k: usize| match &ia {
                Some(m) => av.data[m[k]],
                None => av.data[k],
            };
            let bt = |k: usize| match &ib {
                Some(m) => bv.data[m[k]],
                None => bv.data[k],
            };
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                Binary::Mul => (
                    g.iter().enumerate().map(|(k, v)| v * bt(k)).collect(),
                    g.iter().enumerate().map(|(k, v)| v * at(k)).collect(),
                ),
                Binary::Div => (
                    g.iter().enumerate().map(|(k, v)| v / bt(k)).collect(),
                    g.iter()
                        .enumerate()
                        .map(|(k, v)| -v * at(k) / (bt(k) * bt(k)))
                        .collect(),
                ),
            };
            let ga = reduce_broadcast(&ga, &out.shape, &av.shape);
            let gb = reduce_broadcast(&gb, &out.shape, &bv.shape);
            add_into(&mut adj[*a], ga, av.data.len());
            add_into(&mut adj[*b], gb, bv.data.len());
        }
        Op::Unary(kind, p) => {
            let x = &nodes[*p].value;
            let grad = x
                .data
                .iter()
                .zip(&out.data)
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv));
            add_into(&mut adj[*p], grad, x.data.len());
        }
        Op::Affine { parent, scale } => {
            add_into(&mut adj[*parent], g.iter().map(|v| v * scale), g.len());
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            // dA = G · Bᵀ
            let ga = adj[*a].get_or_insert_with(|| vec![0.0; m * k]);
            gemm(m, n, k, g, (n, 1), &bv.data, (1, n), ga, true);
            // dB = Aᵀ · G
            let gb = adj[*b].get_or_insert_with(|| vec![0.0; k * n]);
            gemm(k, m, n, &av.data, (1, k), g, (n, 1), gb, true);
        }
        Op::Sum(p) => {
            let len = nodes[*p].value.data.len();
            add_into(&mut adj[*p], std::iter::repeat_n(g[0], len), len);
        }
        Op::Mean(p) => {
            let len = nodes[*p].value.data.len();
            add_into(&mut adj[*p], std::iter::repeat_n(g[0] / len as f64, len), len);
        }
        Op::Clamp { parent, lo, hi } => {
            let x = &nodes[*parent].value;
            let grad = x
                .data
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
            add_into(&mut adj[*parent], grad, x.data.len());
        }
        Op::Broadcast(p) => {
            let x = &nodes[*p].value;
            let grad = reduce_broadcast(g, &out.shape, &x.shape);
            add_into(&mut adj[*p], grad, x.data.len());
        }
        Op::Reshape(p) => {
            add_into(&mut adj[*p], g.iter().copied(), g.len());
        }
        Op::Transpose(p) => {
            // out is [c, r]; parent is [r, c]
            let (c, r) = (out.shape[0], out.shape[1]);
            let slot = adj[*p].get_or_insert_with(|| vec![0.0; r * c]);
            for i in 0..r {
                for j in 0..c {
                    slot[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Custom(parents, rule) => {
            let inputs: Vec<&Tensor> = parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let grads = rule.backward(&inputs, out, g);
            debug_assert_eq!(grads.len(), parents.len(), "{} returned wrong arity", rule.name());
            for (&p, grad) in parents.iter().zip(grads) {
                let len = nodes[p].value.data.len();
                add_into(&mut adj[p], grad, len);
            }
        }
    }
}

/// `out (+)= A · B` for row-major buffers with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    out: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every buffer spans the full extent implied by its dimensions and
    // strides, which the callers derive from validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index of the element of a
/// tensor with shape `in_shape` that broadcasts onto it.
fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + offset] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v<'t>(tape: &'t Tape, data: &[f64]) -> Var<'t> {
        tape.leaf(Tensor::from_vec(data.to_vec()))
    }

    #[test]
    fn tensor_rejects_bad_length_and_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(AutodiffError::Length { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            Tensor::checked(vec![2], vec![1.0, f64::NAN]),
            Err(AutodiffError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn silu_and_softplus_at_zero() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        assert_eq!(x.silu().unwrap().value().item(), Some(0.0));
        let sp = x.softplus().unwrap();
        assert!((sp.value().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        tape.backward(sp).unwrap();
        assert!((x.grad().item().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, 2.0, 3.0]);
        let y = x.mul(x).unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = v(&tape, &[1.5]);
        let y = x.square().unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().data(), &[6.0]);
        tape.zero_gradients(&[x]);
        assert_eq!(x.grad().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, 2.0]);
        assert_eq!(tape.backward(x), Err(AutodiffError::NonScalarRoot(vec![2])));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = v(&tape, &[1.0, 2.0]);
        let b = v(&tape, &[1.0, 2.0, 3.0]);
        match a.add(b) {
            Err(AutodiffError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_errors_carry_operand_and_index() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, -2.0]);
        assert!(matches!(
            x.log(),
            Err(AutodiffError::Domain { op: "log", operand: 0, index: 1, .. })
        ));
        assert!(x.sqrt().is_err());
        assert!(x.lgamma().is_err());
        let z = v(&tape, &[3.0, 0.0]);
        assert!(matches!(
            x.div(z),
            Err(AutodiffError::Domain { operand: 1, index: 1, .. })
        ));
    }

    #[test]
    fn broadcasting_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let c = a.mul(b).unwrap();
        assert_eq!(c.value().data(), &[10.0, 20.0, 30.0, 80.0, 100.0, 120.0]);
        tape.backward(c.sum().unwrap()).unwrap();
        assert_eq!(b.grad().data(), &[6.0, 15.0]);
        assert_eq!(a.grad().data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn clamp_gradient_is_one_on_closed_interval() {
        let tape = Tape::new();
        let x = v(&tape, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let y = x.clamp(-1.0, 1.0).unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn transpose_and_matmul() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let at = a.transpose().unwrap();
        assert_eq!(at.shape(), vec![3, 2]);
        assert_eq!(at.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let p = a.matmul(at).unwrap();
        assert_eq!(p.value().data(), &[14.0, 32.0, 32.0, 77.0]);
        tape.backward(p.sum().unwrap()).unwrap();
        // column sums of A are [5, 7, 9]; gradient of Σ_ij (A Aᵀ)_ij w.r.t. A_kl is 2 Σ_i A_il
        assert_eq!(a.grad().data(), &[10.0, 14.0, 18.0, 10.0, 14.0, 18.0]);
    }

    #[test]
    fn broadcast_index_layout() {
        assert_eq!(broadcast_index(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_index(&[2, 2], &[]), vec![0, 0, 0, 0]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }
}

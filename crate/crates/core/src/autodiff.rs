//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward evaluation as a
//! [`Node`]. Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! The tape is meant to be thrown away after its backward pass.
//!
//! ```
//! use nrdm::autodiff::Tape;
//! use nrdm::Tensor;
//!
//! let mut tape = Tape::new();
//! let z = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.square(z).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(z).data(), &[2.0, 4.0]);
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, for_each_broadcast, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identifiers understood by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpTag {
    /// Elementwise with broadcasting.
    Add,
    Sub,
    Mul,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Multiply by a constant.
    Scale(f64),
    /// `x W + b` with `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    Affine,
    Tanh,
    Silu,
    Square,
    /// `ln(1 + e^x)`.
    Softplus,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Adds a broadcast operand into the shape of the first input.
    BroadcastAdd,
}

impl OpTag {
    pub fn name(&self) -> &'static str {
        match self {
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::MatMul => "matmul",
            OpTag::Scale(_) => "scale",
            OpTag::Affine => "affine",
            OpTag::Tanh => "tanh",
            OpTag::Silu => "silu",
            OpTag::Square => "square",
            OpTag::Softplus => "softplus",
            OpTag::Sum => "sum",
            OpTag::Mean => "mean",
            OpTag::BroadcastAdd => "broadcast-add",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpTag::Add | OpTag::Sub | OpTag::Mul | OpTag::MatMul | OpTag::BroadcastAdd => 2,
            OpTag::Affine => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpTag::Scale(c) => write!(f, "scale:{c}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for OpTag {
    type Err = Error;

    /// Parses an operation name; `scale` takes its factor as `scale:<c>`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpTag::Add,
            "sub" => OpTag::Sub,
            "mul" => OpTag::Mul,
            "matmul" => OpTag::MatMul,
            "affine" => OpTag::Affine,
            "tanh" => OpTag::Tanh,
            "silu" => OpTag::Silu,
            "square" => OpTag::Square,
            "softplus" => OpTag::Softplus,
            "sum" => OpTag::Sum,
            "mean" => OpTag::Mean,
            "broadcast-add" => OpTag::BroadcastAdd,
            other => match other.strip_prefix("scale:").map(str::parse::<f64>) {
                Some(Ok(c)) => OpTag::Scale(c),
                _ => return Err(Error::UnsupportedOp(other.to_string())),
            },
        })
    }
}

#[derive(Clone, Debug)]
enum NodeOp {
    Leaf,
    Apply(OpTag),
}

/// One recorded value and how it was produced.
#[derive(Clone, Debug)]
pub struct Node {
    value: Tensor,
    op: NodeOp,
    parents: Vec<Var>,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn parents(&self) -> &[Var] {
        &self.parents
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, NodeOp::Leaf)
    }

    pub fn op(&self) -> Option<OpTag> {
        match self.op {
            NodeOp::Leaf => None,
            NodeOp::Apply(tag) => Some(tag),
        }
    }
}

/// Append-only record of a forward evaluation.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, NodeOp::Leaf, Vec::new(), true)
    }

    /// An input that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, NodeOp::Leaf, Vec::new(), false)
    }

    fn push(&mut self, value: Tensor, op: NodeOp, parents: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `tag` on `inputs` and records the result.
    pub fn apply(&mut self, tag: OpTag, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != tag.arity() {
            return Err(Error::Arity {
                op: tag.name(),
                expected: tag.arity(),
                got: inputs.len(),
            });
        }
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(tag, &xs)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(tag.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, NodeOp::Apply(tag), inputs.to_vec(), requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpTag::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpTag::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpTag::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpTag::MatMul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpTag::Scale(c), &[a])
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(OpTag::Affine, &[x, w, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpTag::Tanh, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpTag::Silu, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpTag::Square, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(OpTag::Softplus, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpTag::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpTag::Mean, &[a])
    }

    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpTag::BroadcastAdd, &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let NodeOp::Apply(tag) = node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let wants: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let contribs = backward_rule(tag, &inputs, &node.value, &g, &wants);
            for (p, c) in node.parents.iter().zip(contribs) {
                if let Some(c) = c {
                    accumulate(&mut grads[p.0], c);
                }
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, c: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(c.data()) {
                *a += b;
            }
        }
        None => *slot = Some(c),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dims2(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(mismatch());
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

fn forward(tag: OpTag, x: &[&Tensor]) -> Result<Tensor> {
    match tag {
        OpTag::Add => x[0].add(x[1]),
        OpTag::Sub => x[0].sub(x[1]),
        OpTag::Mul => x[0].mul(x[1]),
        OpTag::BroadcastAdd => {
            let out = broadcast_shape("broadcast-add", x[0].shape(), x[1].shape())?;
            if out != x[0].shape() {
                return Err(Error::ShapeMismatch {
                    op: "broadcast-add",
                    lhs: x[0].shape().to_vec(),
                    rhs: x[1].shape().to_vec(),
                });
            }
            x[0].add(x[1])
        }
        OpTag::MatMul => {
            let (m, k, n) = dims2("matmul", x[0], x[1])?;
            let mut out = vec![0.0; m * n];
            matmul_raw(x[0].data(), x[1].data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)
        }
        OpTag::Affine => {
            let (m, k, n) = dims2("affine", x[0], x[1])?;
            if x[2].numel() != n || x[2].rank() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "affine",
                    lhs: x[1].shape().to_vec(),
                    rhs: x[2].shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(x[2].data());
            }
            matmul_raw(x[0].data(), x[1].data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)
        }
        OpTag::Scale(c) => Ok(x[0].scale(c)),
        OpTag::Tanh => Ok(x[0].map(f64::tanh)),
        OpTag::Silu => Ok(x[0].map(|v| v * sigmoid(v))),
        OpTag::Square => Ok(x[0].map(|v| v * v)),
        OpTag::Softplus => Ok(x[0].map(softplus)),
        OpTag::Sum => Ok(Tensor::scalar(x[0].sum())),
        OpTag::Mean => Ok(Tensor::scalar(x[0].mean())),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize], sign: f64) -> Tensor {
    if g.shape() == shape {
        return if sign == 1.0 { g.clone() } else { g.scale(sign) };
    }
    let mut out = Tensor::zeros(shape);
    {
        let od = out.data_mut();
        for_each_broadcast(g.shape(), shape, g.shape(), |o, _, ib| {
            od[ib] += sign * g.data()[o];
        });
    }
    out
}

fn transpose_matmul_left(a: &Tensor, g: &Tensor) -> Vec<f64> {
    // a^T g with a: [m, k], g: [m, n] -> [k, n]
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn matmul_transpose_right(g: &Tensor, b: &Tensor) -> Vec<f64> {
    // g b^T with g: [m, n], b: [k, n] -> [m, k]
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn backward_rule(tag: OpTag, x: &[&Tensor], y: &Tensor, g: &Tensor, wants: &[bool]) -> Vec<Option<Tensor>> {
    let unary = |f: &dyn Fn(usize) -> f64| {
        let data = (0..g.numel()).map(f).collect();
        vec![Some(Tensor::new(x[0].shape().to_vec(), data).expect("shape"))]
    };
    match tag {
        OpTag::Add | OpTag::BroadcastAdd => vec![
            wants[0].then(|| reduce_to(g, x[0].shape(), 1.0)),
            wants[1].then(|| reduce_to(g, x[1].shape(), 1.0)),
        ],
        OpTag::Sub => vec![
            wants[0].then(|| reduce_to(g, x[0].shape(), 1.0)),
            wants[1].then(|| reduce_to(g, x[1].shape(), -1.0)),
        ],
        OpTag::Mul => {
            let mut ga = wants[0].then(|| Tensor::zeros(x[0].shape()));
            let mut gb = wants[1].then(|| Tensor::zeros(x[1].shape()));
            let (ad, bd, gd) = (x[0].data(), x[1].data(), g.data());
            match (&mut ga, &mut gb) {
                (Some(ta), Some(tb)) => {
                    let (da, db) = (ta.data_mut(), tb.data_mut());
                    for_each_broadcast(x[0].shape(), x[1].shape(), g.shape(), |o, ia, ib| {
                        da[ia] += gd[o] * bd[ib];
                        db[ib] += gd[o] * ad[ia];
                    });
                }
                (Some(ta), None) => {
                    let da = ta.data_mut();
                    for_each_broadcast(x[0].shape(), x[1].shape(), g.shape(), |o, ia, ib| {
                        da[ia] += gd[o] * bd[ib];
                    });
                }
                (None, Some(tb)) => {
                    let db = tb.data_mut();
                    for_each_broadcast(x[0].shape(), x[1].shape(), g.shape(), |o, ia, ib| {
                        db[ib] += gd[o] * ad[ia];
                    });
                }
                (None, None) => {}
            }
            vec![ga, gb]
        }
        OpTag::MatMul => vec![
            wants[0].then(|| Tensor::new(x[0].shape().to_vec(), matmul_transpose_right(g, x[1])).expect("shape")),
            wants[1].then(|| Tensor::new(x[1].shape().to_vec(), transpose_matmul_left(x[0], g)).expect("shape")),
        ],
        OpTag::Affine => {
            let gbias = wants[2].then(|| {
                let n = g.shape()[1];
                let mut out = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new(vec![n], out).expect("shape")
            });
            vec![
                wants[0].then(|| Tensor::new(x[0].shape().to_vec(), matmul_transpose_right(g, x[1])).expect("shape")),
                wants[1].then(|| Tensor::new(x[1].shape().to_vec(), transpose_matmul_left(x[0], g)).expect("shape")),
                gbias,
            ]
        }
        OpTag::Scale(c) => vec![Some(g.scale(c))],
        OpTag::Tanh => unary(&|i| g.data()[i] * (1.0 - y.data()[i] * y.data()[i])),
        OpTag::Silu => unary(&|i| {
            let v = x[0].data()[i];
            let s = sigmoid(v);
            g.data()[i] * s * (1.0 + v * (1.0 - s))
        }),
        OpTag::Square => unary(&|i| 2.0 * x[0].data()[i] * g.data()[i]),
        OpTag::Softplus => unary(&|i| g.data()[i] * sigmoid(x[0].data()[i])),
        OpTag::Sum => vec![Some(Tensor::full(x[0].shape(), g.item()))],
        OpTag::Mean => vec![Some(Tensor::full(x[0].shape(), g.item() / x[0].numel() as f64))],
    }
}

/// Central finite-difference gradient of a scalar function.
///
/// Each coordinate `i` gets `(f(z + h e_i) - f(z - h e_i)) / 2h`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, z: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = z.clone();
    let mut out = vec![0.0; z.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = z.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        *slot = (fp - fm) / (2.0 * h);
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// `max|a - b| / max(max|b|, floor)`, the normwise relative error used by the
/// gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.max_abs().max(floor)
}

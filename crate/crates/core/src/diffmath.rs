//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every primitive records itself on a [`Tape`]. The backward sweep in
//! [`Tape::gradient`] expresses each vector-Jacobian product through the same
//! primitives, so a gradient returned by the tape is itself a differentiable
//! node. This is what the critic's gradient penalty needs: the input gradient
//! `∇ₓD` is built as a graph, reduced to a penalty, and differentiated again
//! with respect to the critic weights.
//!
//! The primitive set is deliberately small and closed under differentiation:
//! the three bilinear convolution maps ([`Var::conv2d`],
//! [`Var::conv_input_grad`], [`Var::conv_weight_grad`]) are each other's
//! adjoints, and the broadcast/reduce pairs are transposes of one another.
//!
//! ```
//! use qimagegen::diffmath::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let theta = tape.var(Tensor::scalar(3.0));
//! let f = theta.mul(theta).unwrap();
//! let g = tape.gradient(f, &[theta]).unwrap();
//! assert_eq!(f.item(), 9.0);
//! assert_eq!(g[0].item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    BadShape { op: &'static str, msg: String },
    #[error("tensor of shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("gradient needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("replay expects {expected} leaf values, got {got}")]
    ReplayArity { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Zero-dimensional tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Stride and symmetric zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output_side(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    Sum(usize),
    Fill(usize, Vec<usize>),
    SumRows(usize),
    BroadcastRows(usize, Vec<usize>),
    Tile(usize, usize),
    SumBatch(usize),
    BroadcastChannel(usize, Vec<usize>),
    ChannelSum(usize),
    Reshape(usize, Vec<usize>),
    Recip(usize),
    Sqrt(usize),
    LeakyRelu(usize, f64),
    LeakyMask(usize, usize, f64),
    Conv2d(usize, usize, ConvGeom),
    ConvInputGrad(usize, usize, ConvGeom, [usize; 2]),
    ConvWeightGrad(usize, usize, ConvGeom, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            LeakyMask(a, b, _)
            | Conv2d(a, b, _)
            | ConvInputGrad(a, b, _, _)
            | ConvWeightGrad(a, b, _, _) => vec![a, b],
            Scale(a, _)
            | AddConst(a, _)
            | Sum(a)
            | SumRows(a)
            | Tile(a, _)
            | SumBatch(a)
            | ChannelSum(a)
            | Recip(a)
            | Sqrt(a)
            | LeakyRelu(a, _) => vec![a],
            Fill(a, _) | BroadcastRows(a, _) | BroadcastChannel(a, _) | Reshape(a, _) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Node ids are assigned in creation order, so parents always precede their
/// consumers and the reverse sweep is a plain descending walk.
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

    /// Leaf that gradients can be taken with respect to.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant by the reverse sweep.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, op: Op) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let value = eval(&op, |id| &nodes[id].value)?;
            let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
            (value, requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse-mode gradient of a one-element `output` with respect to `wrt`.
    ///
    /// The returned variables live on this tape and can be differentiated
    /// again. Variables that `output` does not depend on get zero gradients.
    pub fn gradient<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarOutput(out_shape));
        }
        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; output.id + 1];
        adjoint[output.id] = Some(self.constant(Tensor::full(&out_shape, 1.0)));

        for id in (0..=output.id).rev() {
            let Some(gbar) = adjoint[id] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            for (parent, contribution) in self.vjp(id, &op, gbar)? {
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => acc.add(contribution)?,
                    None => contribution,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var_at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn vjp<'t>(&'t self, id: usize, op: &Op, gbar: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let v = |i: usize| self.var_at(i);
        match *op {
            Leaf => {}
            Add(a, b) => {
                if self.needs(a) {
                    out.push((a, gbar));
                }
                if self.needs(b) {
                    out.push((b, gbar));
                }
            }
            Sub(a, b) => {
                if self.needs(a) {
                    out.push((a, gbar));
                }
                if self.needs(b) {
                    out.push((b, gbar.scale(-1.0)?));
                }
            }
            Mul(a, b) => {
                if self.needs(a) {
                    out.push((a, gbar.mul(v(b))?));
                }
                if self.needs(b) {
                    out.push((b, gbar.mul(v(a))?));
                }
            }
            Scale(a, c) => out.push((a, gbar.scale(c)?)),
            AddConst(a, _) => out.push((a, gbar)),
            Sum(a) => out.push((a, gbar.fill(&v(a).shape())?)),
            Fill(a, _) => out.push((a, gbar.sum()?)),
            SumRows(a) => out.push((a, gbar.broadcast_rows(&v(a).shape())?)),
            BroadcastRows(a, _) => out.push((a, gbar.sum_rows()?)),
            Tile(a, _) => out.push((a, gbar.sum_batch()?)),
            SumBatch(a) => {
                let batch = v(a).shape()[0];
                out.push((a, gbar.tile(batch)?));
            }
            BroadcastChannel(a, _) => out.push((a, gbar.channel_sum()?)),
            ChannelSum(a) => out.push((a, gbar.broadcast_channel(&v(a).shape())?)),
            Reshape(a, _) => out.push((a, gbar.reshape(&v(a).shape())?)),
            Recip(a) => {
                let y = v(id);
                out.push((a, gbar.mul(y)?.mul(y)?.scale(-1.0)?));
            }
            Sqrt(a) => {
                let y = v(id);
                out.push((a, gbar.mul(y.recip()?)?.scale(0.5)?));
            }
            LeakyRelu(a, slope) => out.push((a, gbar.leaky_mask(v(a), slope)?)),
            // The mask is piecewise constant in `x`; only `g` carries a derivative.
            LeakyMask(g, x, slope) => {
                if self.needs(g) {
                    out.push((g, gbar.leaky_mask(v(x), slope)?));
                }
            }
            Conv2d(x, w, geom) => {
                let xs = v(x).shape();
                if self.needs(x) {
                    out.push((x, gbar.conv_input_grad(v(w), geom, [xs[2], xs[3]])?));
                }
                if self.needs(w) {
                    let k = v(w).shape()[2];
                    out.push((w, v(x).conv_weight_grad(gbar, geom, k)?));
                }
            }
            ConvInputGrad(g, w, geom, _) => {
                if self.needs(g) {
                    out.push((g, gbar.conv2d(v(w), geom)?));
                }
                if self.needs(w) {
                    let k = v(w).shape()[2];
                    out.push((w, gbar.conv_weight_grad(v(g), geom, k)?));
                }
            }
            ConvWeightGrad(x, g, geom, _) => {
                if self.needs(x) {
                    let xs = v(x).shape();
                    out.push((x, v(g).conv_input_grad(gbar, geom, [xs[2], xs[3]])?));
                }
                if self.needs(g) {
                    out.push((g, v(x).conv2d(gbar, geom)?));
                }
            }
        }
        Ok(out)
    }

    /// Recompute every recorded node from new leaf values, in leaf creation
    /// order. Passing the original leaves reproduces the recorded values
    /// bit for bit.
    pub fn replay(&self, leaves: &[Tensor]) -> Result<Replay> {
        let nodes = self.nodes.borrow();
        let n_leaves = nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count();
        if n_leaves != leaves.len() {
            return Err(DiffError::ReplayArity {
                expected: n_leaves,
                got: leaves.len(),
            });
        }
        let mut values: Vec<Rc<Tensor>> = Vec::with_capacity(nodes.len());
        let mut next_leaf = leaves.iter();
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf => {
                    let leaf = next_leaf.next().expect("leaf count checked above");
                    if leaf.shape() != node.value.shape() {
                        return Err(DiffError::ShapeMismatch {
                            op: "replay",
                            lhs: node.value.shape().to_vec(),
                            rhs: leaf.shape().to_vec(),
                        });
                    }
                    leaf.clone()
                }
                ref op => eval(op, |id| &values[id])?,
            };
            values.push(Rc::new(value));
        }
        Ok(Replay { values })
    }

    /// Current values of all leaves, in creation order.
    pub fn leaf_values(&self) -> Vec<Tensor> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf))
            .map(|n| (*n.value).clone())
            .collect()
    }
}

/// Values produced by [`Tape::replay`].
pub struct Replay {
    values: Vec<Rc<Tensor>>,
}

impl Replay {
    pub fn get(&self, var: Var<'_>) -> &Tensor {
        &self.values[var.id]
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element of the value; intended for scalars.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Sub(self.id, other.id))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.push(Op::Scale(self.id, c))
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        self.tape.push(Op::AddConst(self.id, c))
    }

    /// Sum of all elements as a zero-dimensional tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.push(Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.shape().iter().product::<usize>();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn fill(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(Op::Fill(self.id, shape.to_vec()))
    }

    /// `[B, ...] -> [B]`, summing everything but the leading axis.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.tape.push(Op::SumRows(self.id))
    }

    /// `[B] -> shape` where `shape[0] == B`.
    pub fn broadcast_rows(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(Op::BroadcastRows(self.id, shape.to_vec()))
    }

    /// `S -> [batch, S...]`.
    pub fn tile(self, batch: usize) -> Result<Var<'t>> {
        self.tape.push(Op::Tile(self.id, batch))
    }

    /// `[B, S...] -> S`.
    pub fn sum_batch(self) -> Result<Var<'t>> {
        self.tape.push(Op::SumBatch(self.id))
    }

    /// `[C] -> [B, C, H, W]`.
    pub fn broadcast_channel(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(Op::BroadcastChannel(self.id, shape.to_vec()))
    }

    /// `[B, C, H, W] -> [C]`.
    pub fn channel_sum(self) -> Result<Var<'t>> {
        self.tape.push(Op::ChannelSum(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(Op::Reshape(self.id, shape.to_vec()))
    }

    /// Elementwise `1/x`, with `1/0` defined as `0`.
    pub fn recip(self) -> Result<Var<'t>> {
        self.tape.push(Op::Recip(self.id))
    }

    /// Elementwise square root. Its derivative at exactly zero is taken as
    /// zero, the subgradient the penalty's norm needs for a constant critic.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.push(Op::Sqrt(self.id))
    }

    /// `x` for `x > 0`, `slope·x` otherwise.
    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.tape.push(Op::LeakyRelu(self.id, slope))
    }

    /// `self ⊙ leaky_relu'(x)`, with derivative `slope` at `x == 0`.
    pub fn leaky_mask(self, x: Var<'t>, slope: f64) -> Result<Var<'t>> {
        self.tape.push(Op::LeakyMask(self.id, x.id, slope))
    }

    /// `[B, Cin, H, W] ⋆ [Cout, Cin, K, K] -> [B, Cout, Ho, Wo]`.
    pub fn conv2d(self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        self.tape.push(Op::Conv2d(self.id, weight.id, geom))
    }

    /// Adjoint of [`Var::conv2d`] in its input: maps an output cotangent
    /// `[B, Cout, Ho, Wo]` back to `[B, Cin, H, W]`.
    pub fn conv_input_grad(
        self,
        weight: Var<'t>,
        geom: ConvGeom,
        input_hw: [usize; 2],
    ) -> Result<Var<'t>> {
        self.tape
            .push(Op::ConvInputGrad(self.id, weight.id, geom, input_hw))
    }

    /// Adjoint of [`Var::conv2d`] in its weight: `self` is the input
    /// `[B, Cin, H, W]`, `out_grad` the output cotangent.
    pub fn conv_weight_grad(
        self,
        out_grad: Var<'t>,
        geom: ConvGeom,
        kernel: usize,
    ) -> Result<Var<'t>> {
        self.tape
            .push(Op::ConvWeightGrad(self.id, out_grad.id, geom, kernel))
    }
}

fn eval<'a>(op: &Op, val: impl Fn(usize) -> &'a Rc<Tensor>) -> Result<Tensor> {
    use Op::*;
    match *op {
        Leaf => unreachable!("leaves are never re-evaluated"),
        Add(a, b) => zip("add", val(a), val(b), |x, y| x + y),
        Sub(a, b) => zip("sub", val(a), val(b), |x, y| x - y),
        Mul(a, b) => zip("mul", val(a), val(b), |x, y| x * y),
        Scale(a, c) => Ok(map(val(a), |x| x * c)),
        AddConst(a, c) => Ok(map(val(a), |x| x + c)),
        Sum(a) => Ok(Tensor::scalar(val(a).data().iter().sum())),
        Fill(a, ref shape) => {
            let t = val(a);
            let v = t.item().ok_or_else(|| DiffError::BadShape {
                op: "fill",
                msg: format!("source must hold one element, has shape {:?}", t.shape()),
            })?;
            Ok(Tensor::full(shape, v))
        }
        SumRows(a) => {
            let t = val(a);
            let (b, row) = split_batch("sum_rows", t)?;
            let data = t.data().chunks(row.max(1)).take(b).map(|r| r.iter().sum()).collect();
            Ok(Tensor {
                shape: vec![b],
                data: if row == 0 { vec![0.0; b] } else { data },
            })
        }
        BroadcastRows(a, ref shape) => {
            let t = val(a);
            if t.shape().len() != 1 || shape.first() != Some(&t.shape()[0]) {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast_rows",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            let row: usize = shape[1..].iter().product();
            let mut data = Vec::with_capacity(t.numel() * row);
            for &v in t.data() {
                data.extend(std::iter::repeat_n(v, row));
            }
            Ok(Tensor {
                shape: shape.clone(),
                data,
            })
        }
        Tile(a, batch) => {
            let t = val(a);
            let mut shape = vec![batch];
            shape.extend_from_slice(t.shape());
            let mut data = Vec::with_capacity(batch * t.numel());
            for _ in 0..batch {
                data.extend_from_slice(t.data());
            }
            Ok(Tensor { shape, data })
        }
        SumBatch(a) => {
            let t = val(a);
            let (b, row) = split_batch("sum_batch", t)?;
            let mut data = vec![0.0; row];
            for r in 0..b {
                for (acc, &x) in data.iter_mut().zip(&t.data()[r * row..(r + 1) * row]) {
                    *acc += x;
                }
            }
            Ok(Tensor {
                shape: t.shape()[1..].to_vec(),
                data,
            })
        }
        BroadcastChannel(a, ref shape) => {
            let t = val(a);
            if shape.len() != 4 || t.shape() != [shape[1]] {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast_channel",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            let plane = shape[2] * shape[3];
            let mut data = Vec::with_capacity(shape.iter().product());
            for _ in 0..shape[0] {
                for &v in t.data() {
                    data.extend(std::iter::repeat_n(v, plane));
                }
            }
            Ok(Tensor {
                shape: shape.clone(),
                data,
            })
        }
        ChannelSum(a) => {
            let t = val(a);
            let s = four_d("channel_sum", t)?;
            let plane = s[2] * s[3];
            let mut data = vec![0.0; s[1]];
            for b in 0..s[0] {
                for (c, acc) in data.iter_mut().enumerate() {
                    let off = (b * s[1] + c) * plane;
                    *acc += t.data()[off..off + plane].iter().sum::<f64>();
                }
            }
            Ok(Tensor {
                shape: vec![s[1]],
                data,
            })
        }
        Reshape(a, ref shape) => {
            let t = val(a);
            if shape.iter().product::<usize>() != t.numel() {
                return Err(DiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(Tensor {
                shape: shape.clone(),
                data: t.data().to_vec(),
            })
        }
        Recip(a) => Ok(map(val(a), |x| if x == 0.0 { 0.0 } else { 1.0 / x })),
        Sqrt(a) => {
            let t = val(a);
            if let Some(bad) = t.data().iter().find(|&&x| x < 0.0) {
                return Err(DiffError::BadShape {
                    op: "sqrt",
                    msg: format!("negative argument {bad}"),
                });
            }
            Ok(map(t, f64::sqrt))
        }
        LeakyRelu(a, slope) => Ok(map(val(a), |x| if x > 0.0 { x } else { slope * x })),
        LeakyMask(g, x, slope) => zip("leaky_mask", val(g), val(x), |g, x| {
            if x > 0.0 {
                g
            } else {
                slope * g
            }
        }),
        Conv2d(x, w, geom) => conv2d(val(x), val(w), geom),
        ConvInputGrad(g, w, geom, hw) => conv_input_grad(val(g), val(w), geom, hw),
        ConvWeightGrad(x, g, geom, k) => conv_weight_grad(val(x), val(g), geom, k),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

fn split_batch(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().first() {
        Some(&b) => Ok((b, t.shape()[1..].iter().product())),
        None => Err(DiffError::BadShape {
            op,
            msg: "needs a leading batch axis".into(),
        }),
    }
}

fn four_d(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(DiffError::BadShape {
            op,
            msg: format!("expected a 4-d tensor, got shape {:?}", t.shape()),
        }),
    }
}

/// Maps an output position and kernel offset to an input coordinate.
#[inline]
fn source(out: usize, offset: usize, geom: ConvGeom, limit: usize) -> Option<usize> {
    let pos = (out * geom.stride + offset) as isize - geom.pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

fn conv_dims(
    op: &'static str,
    x: [usize; 4],
    w: [usize; 4],
    geom: ConvGeom,
) -> Result<(usize, usize)> {
    if w[1] != x[1] || w[2] != w[3] {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let ho = geom.output_side(x[2], w[2]);
    let wo = geom.output_side(x[3], w[3]);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok((ho, wo)),
        _ => Err(DiffError::ShapeMismatch {
            op,
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        }),
    }
}

fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let xs = four_d("conv2d", x)?;
    let ws = four_d("conv2d", w)?;
    let (ho, wo) = conv_dims("conv2d", xs, ws, geom)?;
    let [nb, cin, h, wd] = xs;
    let [cout, _, k, _] = ws;
    let mut out = vec![0.0; nb * cout * ho * wo];
    let (xd, wdat) = (x.data(), w.data());
    for b in 0..nb {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        let xbase = (b * cin + c) * h * wd;
                        let wbase = (o * cin + c) * k * k;
                        for p in 0..k {
                            let Some(u) = source(i, p, geom, h) else { continue };
                            for q in 0..k {
                                let Some(v) = source(j, q, geom, wd) else { continue };
                                acc += xd[xbase + u * wd + v] * wdat[wbase + p * k + q];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![nb, cout, ho, wo],
        data: out,
    })
}

fn conv_input_grad(g: &Tensor, w: &Tensor, geom: ConvGeom, hw: [usize; 2]) -> Result<Tensor> {
    let gs = four_d("conv_input_grad", g)?;
    let ws = four_d("conv_input_grad", w)?;
    let [nb, cout, ho, wo] = gs;
    let [wcout, cin, k, _] = ws;
    let [h, wd] = hw;
    let expected = (geom.output_side(h, k), geom.output_side(wd, k));
    if wcout != cout || expected != (Some(ho), Some(wo)) {
        return Err(DiffError::ShapeMismatch {
            op: "conv_input_grad",
            lhs: gs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let mut out = vec![0.0; nb * cin * h * wd];
    let (gd, wdat) = (g.data(), w.data());
    for b in 0..nb {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let gv = gd[((b * cout + o) * ho + i) * wo + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        let obase = (b * cin + c) * h * wd;
                        let wbase = (o * cin + c) * k * k;
                        for p in 0..k {
                            let Some(u) = source(i, p, geom, h) else { continue };
                            for q in 0..k {
                                let Some(v) = source(j, q, geom, wd) else { continue };
                                out[obase + u * wd + v] += gv * wdat[wbase + p * k + q];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![nb, cin, h, wd],
        data: out,
    })
}

fn conv_weight_grad(x: &Tensor, g: &Tensor, geom: ConvGeom, k: usize) -> Result<Tensor> {
    let xs = four_d("conv_weight_grad", x)?;
    let gs = four_d("conv_weight_grad", g)?;
    let [nb, cin, h, wd] = xs;
    let [gb, cout, ho, wo] = gs;
    if gb != nb || geom.output_side(h, k) != Some(ho) || geom.output_side(wd, k) != Some(wo) {
        return Err(DiffError::ShapeMismatch {
            op: "conv_weight_grad",
            lhs: xs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    let mut out = vec![0.0; cout * cin * k * k];
    let (xd, gd) = (x.data(), g.data());
    for b in 0..nb {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let gv = gd[((b * cout + o) * ho + i) * wo + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        let xbase = (b * cin + c) * h * wd;
                        let wbase = (o * cin + c) * k * k;
                        for p in 0..k {
                            let Some(u) = source(i, p, geom, h) else { continue };
                            for q in 0..k {
                                let Some(v) = source(j, q, geom, wd) else { continue };
                                out[wbase + p * k + q] += gv * xd[xbase + u * wd + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![cout, cin, k, k],
        data: out,
    })
}

//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward pass builds a fresh [`Graph`]. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] simply walks it in reverse. Reusing a [`Var`] in
//! several places (for example the shared weights of an unrolled recurrent
//! loop) accumulates its gradient additively.

use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        input: Var,
        kind: PoolKind,
        kh: usize,
        kw: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    GlobalPool {
        input: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Prelu {
        input: Var,
        alpha: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    BroadcastSpatial(Var),
    Depthwise {
        input: Var,
        kernel: Tensor,
    },
    Resize(Var),
    ReflectPad(Var),
    Crop {
        input: Var,
        y0: usize,
        x0: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Pool2d { input, .. } | GlobalPool { input, .. } | Act { input, .. } => vec![*input],
            Prelu { input, alpha } => vec![*input, *alpha],
            GroupNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Abs(a) | Square(a) | Sum(a) | Mean(a) => vec![*a],
            Concat { parts, .. } => parts.clone(),
            SliceChannels { input, .. }
            | Clamp { input, .. }
            | Depthwise { input, .. }
            | BroadcastSpatial(input)
            | Resize(input)
            | ReflectPad(input)
            | Crop { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Pushes a node whose `requires_grad` is inherited from its inputs.
    pub(crate) fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node with `requires_grad` that the loss depends on ends up with a
    /// populated gradient; gradients add up over repeated uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::Contract(format!(
                "backward called on a non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0].get_or_insert_with(|| vec![0.0])[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // The op is moved out while its inputs' gradients are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let mut tape = Tape {
            nodes: &self.nodes,
            grads: &mut self.grads,
        };
        let out = i;
        let t = &mut tape;
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => ops::conv::backward(t, *input, *kernel, *bias, *stride, *padding, g),
            Op::Pool2d {
                input,
                kind,
                kh,
                kw,
                stride,
                argmax,
            } => ops::pool::pool2d_backward(t, out, *input, *kind, *kh, *kw, *stride, argmax, g),
            Op::GlobalPool {
                input,
                kind,
                argmax,
            } => ops::pool::global_backward(t, *input, *kind, argmax, g),
            Op::Act { input, kind } => ops::activation::backward(t, out, *input, *kind, g),
            Op::Prelu { input, alpha } => ops::activation::prelu_backward(t, *input, *alpha, g),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => ops::norm::backward(t, *input, *gamma, *beta, *groups, xhat, inv_std, g),
            Op::Add(a, b) => {
                t.acc(*a, |ga| add_into(ga, g));
                t.acc(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                t.acc(*a, |ga| add_into(ga, g));
                t.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (t.nodes[a.0].value.data(), t.nodes[b.0].value.data());
                t.acc(*a, |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                t.acc(*b, |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = t.nodes[b.0].value.data();
                let q = t.nodes[out].value.data();
                t.acc(*a, |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s / y;
                    }
                });
                t.acc(*b, |gb| {
                    for (((d, s), y), q) in gb.iter_mut().zip(g).zip(bv).zip(q) {
                        *d -= s * q / y;
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                t.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += k * s));
            }
            Op::Offset(a) => t.acc(*a, |ga| add_into(ga, g)),
            Op::Abs(a) => {
                let av = t.nodes[a.0].value.data();
                t.acc(*a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(av) {
                        *d += s * sign(*x);
                    }
                });
            }
            Op::Square(a) => {
                let av = t.nodes[a.0].value.data();
                t.acc(*a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(av) {
                        *d += 2.0 * s * x;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                t.acc(*a, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(a) => {
                let s = g[0] / t.nodes[a.0].value.numel() as f64;
                t.acc(*a, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Concat { parts, axis } => ops::shape::concat_backward(t, out, parts, *axis, g),
            Op::SliceChannels { input, start } => ops::shape::slice_backward(t, out, *input, *start, g),
            Op::Clamp { input, lo, hi } => {
                let xv = t.nodes[input.0].value.data();
                let (lo, hi) = (*lo, *hi);
                t.acc(*input, |gx| {
                    for ((d, s), x) in gx.iter_mut().zip(g).zip(xv) {
                        if *x >= lo && *x <= hi {
                            *d += s;
                        }
                    }
                });
            }
            Op::BroadcastSpatial(input) => ops::shape::broadcast_backward(t, out, *input, g),
            Op::Depthwise { input, kernel } => ops::conv::depthwise_backward(t, *input, kernel, g),
            Op::Resize(input) => ops::resample::resize_backward(t, out, *input, g),
            Op::ReflectPad(input) => ops::resample::reflect_pad_backward(t, out, *input, g),
            Op::Crop { input, y0, x0 } => ops::resample::crop_backward(t, out, *input, *y0, *x0, g),
        }
        self.nodes[i].op = op;
    }
}

/// Split borrow of a graph used during the reverse sweep: node values are
/// read while gradient buffers are written.
pub(crate) struct Tape<'a> {
    pub(crate) nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> Tape<'a> {
    #[inline]
    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        let nodes: &'a [Node] = self.nodes;
        &nodes[v.0].value
    }

    #[inline]
    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds into the gradient buffer of `v`, allocating it on first use.
    /// Does nothing when `v` does not require a gradient.
    pub(crate) fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        f(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]));
    }
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

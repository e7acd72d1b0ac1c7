//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] replays
//! the tape in reverse and accumulates gradients into the leaves that were
//! registered with `requires_grad`. Values on the tape are immutable once
//! recorded. A tape is confined to one thread; independent samples use
//! independent tapes.

mod dropout;
pub(crate) mod kernels;
mod ops;

pub use dropout::Dropout;

use crate::error::{Error, Result};
use crate::tensor::{FrameMask, Scalar, Tensor};

use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<E> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: E,
    },
    ClampMax {
        x: Var,
        max: E,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<E>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<E>,
        mask: FrameMask,
    },
    MaskFrames {
        x: Var,
        mask: FrameMask,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        mask: FrameMask,
        probs: Vec<E>,
    },
}

impl<E> Op<E> {
    /// Input handles of the operation, in argument order.
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Conv1d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::Transpose { x }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::ClampMax { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. }
            | Op::InstanceNorm { x, .. }
            | Op::MaskFrames { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
}

/// Records operations and computes gradients by reverse replay.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    kinks: Option<u64>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: None,
        }
    }

    /// Number of recorded values, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable input.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Takes the accumulated gradient out of a leaf.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Starts fingerprinting the branch taken by every non-smooth op (relu,
    /// clamp). Two forward passes with equal fingerprints lie in the same
    /// smooth region, which is what a finite-difference check needs.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn note_kinks(&mut self, branches: impl Iterator<Item = bool>) {
        if let Some(h) = self.kinks.as_mut() {
            for b in branches {
                *h = (*h ^ (b as u64 + 1)).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss` into every leaf that requires a
    /// gradient. Gradients add onto whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_op(idx, &g, &mut grads);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let (Some(g), node) = (g, &mut self.nodes[idx]) else {
                continue;
            };
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = wants(*a).then(|| vec![E::zero(); m * k]);
                let mut db = wants(*b).then(|| vec![E::zero(); k * n]);
                kernels::matmul_backward(
                    val(*a),
                    val(*b),
                    g,
                    m,
                    k,
                    n,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(da) = da {
                    accumulate(grads, *a, &da);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                accumulate(grads, *x, &kernels::transpose(g, s[0], s[1]));
            }
            Op::Conv1d { x, w, bias, geom } => {
                let mut dx = wants(*x).then(|| vec![E::zero(); geom.c_in * geom.frames]);
                let mut dw = wants(*w).then(|| vec![E::zero(); self.value(*w).numel()]);
                let mut db = bias
                    .filter(|b| wants(*b))
                    .map(|_| vec![E::zero(); geom.c_out]);
                kernels::conv1d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, &dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let split = kernels::axis_split(node.value.shape(), *axis);
                let mut dx = vec![E::zero(); g.len()];
                kernels::softmax_backward(node.value.data(), g, split, log, &mut dx);
                accumulate(grads, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<E> = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(xi, gi)| if *xi > E::zero() { *gi } else { E::zero() })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let da: Vec<E> = g.iter().zip(val(*b)).map(|(gi, bi)| *gi * *bi).collect();
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let db: Vec<E> = g.iter().zip(val(*a)).map(|(gi, ai)| *gi * *ai).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<E> = g.iter().map(|v| *v * *c).collect();
                accumulate(grads, *x, &dx);
            }
            Op::ClampMax { x, max } => {
                let dx: Vec<E> = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(xi, gi)| if *xi < *max { *gi } else { E::zero() })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = kernels::axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for x in xs {
                    let len = self.shape(*x)[*axis];
                    if wants(*x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, *x, &dx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.shape(*x);
                let (outer, total, inner) = kernels::axis_split(src, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![E::zero(); outer * total * inner];
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                accumulate(grads, *x, &dx);
            }
            Op::WeightedSum { x, weights } => {
                let dx: Vec<E> = weights.iter().map(|w| *w * g[0]).collect();
                accumulate(grads, *x, &dx);
            }
            Op::InstanceNorm { x, inv_std, mask } => {
                let mut dx = vec![E::zero(); g.len()];
                kernels::instance_norm_backward(node.value.data(), inv_std, g, mask, &mut dx);
                accumulate(grads, *x, &dx);
            }
            Op::MaskFrames { x, mask } => {
                let t = mask.len();
                let dx: Vec<E> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| if mask.get(i % t) { *gi } else { E::zero() })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                window,
                mask,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let numel = self.value(*q).numel();
                let mut dq = wants(*q).then(|| vec![E::zero(); numel]);
                let mut dk = wants(*k).then(|| vec![E::zero(); numel]);
                let mut dv = wants(*v).then(|| vec![E::zero(); numel]);
                kernels::windowed_attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    d,
                    *window,
                    mask,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(grad) = grad {
                        accumulate(grads, var, &grad);
                    }
                }
            }
        }
    }
}

fn accumulate<E: Scalar>(grads: &mut [Option<Vec<E>>], v: Var, g: &[E]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

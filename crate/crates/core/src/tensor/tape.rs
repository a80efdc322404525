use std::sync::atomic::{AtomicU64, Ordering};

use super::{check_finite, conv, nn, ops, Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) index: usize,
    pub(crate) tape: u64,
}

/// Primitive operations with whatever the adjoint needs from the forward pass.
pub(crate) enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddBroadcast(usize, usize),
    Expand(usize),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, padding: usize },
    Relu(usize),
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    MaxPool2d { x: usize, argmax: Vec<u32> },
    GlobalAvgPool(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, normalized: Vec<S>, rstd: Vec<S> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<S> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Expand(..) => "expand",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBroadcast(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Expand(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Record of primitive operations, replayed in reverse by [`Tape::backward`].
///
/// A tape supports exactly one backward pass; afterwards gradients can be read
/// but nothing new can be recorded.
pub struct Tape<S: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only tracked for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        check_finite("leaf", value.data())?;
        Ok(self.record(value, requires_grad, Op::Leaf))
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        self.nodes[var.index].requires_grad
    }

    /// Gradient of the loss w.r.t. `var`, available after [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&Tensor<S>> {
        if var.tape != self.id {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub(crate) fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        Ok(var.index)
    }

    pub(crate) fn val(&self, index: usize) -> &Tensor<S> {
        &self.nodes[index].value
    }

    fn record(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var { index: self.nodes.len() - 1, tape: self.id }
    }

    /// Appends a computed node; gradient tracking is inherited from inputs.
    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.record(value, requires_grad, op))
    }

    /// Propagates adjoints from a scalar `loss` to every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[root].value.shape().to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[root].value.shape().to_vec();
        self.grads[root] = Some(Tensor::full(shape, S::one()));

        for index in (0..=root).rev() {
            let Some(upstream) = self.grads[index].take() else { continue };
            if !self.nodes[index].requires_grad {
                self.grads[index] = Some(upstream);
                continue;
            }
            let contributions = self.adjoints(index, &upstream)?;
            for (input, grad) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                check_finite(self.nodes[index].op.name(), grad.data())
                    .map_err(|_| TensorError::NonFinite { op: "backward" })?;
                match &mut self.grads[input] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += *g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
            self.grads[index] = Some(upstream);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `index` for each of its inputs.
    fn adjoints(&self, index: usize, g: &Tensor<S>) -> Result<Vec<(usize, Tensor<S>)>> {
        let node = &self.nodes[index];
        let out = &node.value;
        let v = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => ops::mul_backward(*a, v(*a), *b, v(*b), g),
            Op::Scale(x, k) => vec![(*x, g.map(|d| d * *k))],
            Op::AddBroadcast(a, b) => ops::add_broadcast_backward(*a, *b, v(*b), g),
            Op::Expand(x) => vec![(*x, ops::sum_leading(g, v(*x).shape()))],
            Op::Sum(x) => vec![(*x, Tensor::full(v(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = S::from_f64(v(*x).numel() as f64);
                vec![(*x, Tensor::full(v(*x).shape(), g.item() / n))]
            }
            Op::MatMul(a, b) => ops::matmul_backward(*a, v(*a), *b, v(*b), g, needs(*a), needs(*b)),
            Op::BatchMatMul { a, b, transpose_b } => {
                ops::bmm_backward(*a, v(*a), *b, v(*b), *transpose_b, g, needs(*a), needs(*b))
            }
            Op::Linear { x, w, b } => {
                ops::linear_backward((*x, v(*x)), (*w, v(*w)), *b, g, needs(*x))
            }
            Op::Conv2d { x, w, b, stride, padding } => conv::conv2d_backward(
                (*x, v(*x)),
                (*w, v(*w)),
                *b,
                *stride,
                *padding,
                g,
                needs(*x),
                needs(*w) || needs(*b),
            ),
            Op::Relu(x) => {
                let mut d = g.clone();
                for (d, o) in d.data_mut().iter_mut().zip(out.data()) {
                    if *o <= S::zero() {
                        *d = S::zero();
                    }
                }
                vec![(*x, d)]
            }
            Op::Gelu(x) => vec![(*x, nn::gelu_backward(v(*x), g))],
            Op::Softmax { x, axis } => vec![(*x, nn::softmax_backward(out, g, *axis))],
            Op::MaxPool2d { x, argmax } => {
                let mut d = Tensor::zeros(v(*x).shape());
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src as usize] += gv;
                }
                vec![(*x, d)]
            }
            Op::GlobalAvgPool(x) => vec![(*x, nn::global_avg_pool_backward(v(*x).shape(), g))],
            Op::LayerNorm { x, gamma, beta, normalized, rstd } => {
                nn::layer_norm_backward((*x, *gamma, *beta), v(*gamma), normalized, rstd, g)
            }
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, nn::cross_entropy_backward(v(*logits).shape(), labels, probs, g.item()))]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(v(*x).shape())?)],
            Op::Permute { x, perm } => vec![(*x, ops::permute_values(g, &ops::inverse_perm(perm)))],
            Op::Narrow { x, axis, start } => {
                vec![(*x, ops::narrow_backward(v(*x).shape(), *axis, *start, g))]
            }
            Op::Concat { parts, axis } => ops::concat_backward(parts, |i| v(i).shape(), *axis, g),
        })
    }
}

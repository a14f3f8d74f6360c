use std::sync::Arc;

use crate::error::{bail, Result};

use super::ops::{self, EltwiseKind, PadMode, DIV_GUARD_EPS};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, pad: PadMode },
    Upsample { input: Var, ratio: usize },
    Eltwise { a: Var, b: Var, kind: EltwiseKind },
    Relu(Var),
    Scale { input: Var, factor: T },
    L1Mean { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Blur { input: Var, taps: Arc<Vec<Vec<T>>> },
    Decimate { input: Var, ratio: usize, offset: usize },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Records forward values in topological order so that [`Tape::backward`]
/// can walk them in reverse. Nodes only ever reference earlier nodes.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for frozen leaves and for non-leaf nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; gradients are produced for it only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, pad: PadMode) -> Result<Var> {
        let value = ops::conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), pad)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { input, kernel, bias, pad }, value, &inputs))
    }

    pub fn upsample(&mut self, input: Var, ratio: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(input), ratio)?;
        Ok(self.push(Op::Upsample { input, ratio }, value, &[input]))
    }

    pub fn eltwise(&mut self, a: Var, b: Var, kind: EltwiseKind) -> Result<Var> {
        let value = ops::eltwise(self.value(a), self.value(b), kind)?;
        Ok(self.push(Op::Eltwise { a, b, kind }, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eltwise(a, b, EltwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eltwise(a, b, EltwiseKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eltwise(a, b, EltwiseKind::Mul)
    }

    pub fn div_guard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.eltwise(a, b, EltwiseKind::DivGuard)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = ops::relu(self.value(input));
        self.push(Op::Relu(input), value, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = ops::scale(self.value(input), factor);
        self.push(Op::Scale { input, factor }, value, &[input])
    }

    /// Scalar mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(ops::l1_mean(self.value(a), self.value(b))?);
        Ok(self.push(Op::L1Mean { a, b }, value, &[a, b]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat { a, b }, value, &[a, b]))
    }

    pub fn blur(&mut self, input: Var, taps: Arc<Vec<Vec<T>>>) -> Result<Var> {
        let value = ops::separable_blur(self.value(input), &taps)?;
        Ok(self.push(Op::Blur { input, taps }, value, &[input]))
    }

    pub fn decimate(&mut self, input: Var, ratio: usize, offset: usize) -> Result<Var> {
        let value = ops::decimate(self.value(input), ratio, offset)?;
        Ok(self.push(Op::Decimate { input, ratio, offset }, value, &[input]))
    }

    /// Reverse-mode sweep from a scalar node. Every trainable leaf gets a
    /// gradient (zeros when unreachable); frozen leaves get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { input, kernel, bias, pad } => {
                    let want = (rg(*input), rg(*kernel), bias.is_some_and(rg));
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*kernel), &g, *pad, want)?;
                    if let Some(gx) = cg.input {
                        accumulate(&mut grads[input.0], gx);
                    }
                    if let Some(gw) = cg.kernel {
                        accumulate(&mut grads[kernel.0], gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        let gb = gb.reshape(self.value(*b).shape())?;
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Upsample { input, ratio } => {
                    let gi = ops::bilinear_upsample_backward(&g, self.value(*input).shape(), *ratio);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Eltwise { a, b, kind } => {
                    let (ga, gb) = ops::eltwise_backward(self.value(*a), self.value(*b), *kind, &g)?;
                    if rg(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if rg(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(self.value(*input), &g);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads[input.0], ops::scale(&g, *factor));
                }
                Op::L1Mean { a, b } => {
                    let ga = ops::l1_mean_backward(self.value(*a), self.value(*b), g.item());
                    if rg(*b) {
                        accumulate(&mut grads[b.0], ga.map(|v| -v));
                    }
                    if rg(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::split_channels(&g, self.value(*a).channels());
                    if rg(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if rg(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Blur { input, taps } => {
                    accumulate(&mut grads[input.0], ops::separable_blur_backward(&g, taps)?);
                }
                Op::Decimate { input, ratio, offset } => {
                    let gi = ops::decimate_backward(&g, self.value(*input).shape(), *ratio, *offset);
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// The branch taken at every non-smooth point of the recorded graph:
    /// relu input signs, L1 residual signs and active division guards.
    /// Two tapes with equal signatures lie on the same smooth piece of the
    /// objective, which is what a finite-difference comparison needs.
    pub fn branch_signature(&self) -> Vec<i8> {
        let sign = |v: T| -> i8 {
            if v > T::zero() {
                1
            } else if v < T::zero() {
                -1
            } else {
                0
            }
        };
        let eps = T::from_f64(DIV_GUARD_EPS);
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => sig.extend(self.value(*input).data().iter().map(|&v| sign(v))),
                Op::L1Mean { a, b } => sig.extend(self.value(*a).data().iter().zip(self.value(*b).data()).map(|(&x, &y)| sign(x - y))),
                Op::Eltwise { b, kind: EltwiseKind::DivGuard, .. } => {
                    sig.extend(self.value(*b).data().iter().map(|&d| (d.abs() < eps) as i8))
                }
                _ => {}
            }
        }
        sig
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output and whatever the backward
//! kernel needs. Node order is creation order, which is a topological order,
//! so `backward` is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, ConvSpec};
use crate::ops::dense::{
    channel_rescale_backward, linear_backward, softmax_cross_entropy_backward,
    CrossEntropyCache, RescaleCache,
};
use crate::ops::norm::{batch_norm_backward, layer_norm_backward, BatchStats, NormCache, NormMode};
use crate::ops::pointwise::{activation_backward, split_channels, Activation};
use crate::ops::pool::{global_avg_pool_backward, pool_backward, PoolSpec};
use crate::ops::{self};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Concat { inputs: Vec<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T>, mode: NormMode },
    Act { x: Var, kind: Activation },
    Pool { x: Var, spec: PoolSpec, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape { x: Var },
    ScaleSamples { x: Var, factors: Vec<T> },
    ChannelRescale { x: Var, gamma: Var, w: Var, b: Var, cache: RescaleCache<T> },
    CrossEntropy { logits: Var, cache: CrossEntropyCache<T> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Arc<Tensor<T>>>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations for a later reverse sweep.
///
/// A tape built with [`Tape::inference`] keeps no backward state and lets the
/// caller [`release`](Tape::release) values that are no longer needed.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            backward_done: false,
        }
    }

    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(Arc::new(value)),
            shape,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A learnable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op: Op::Leaf,
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_deref()
            .expect("value was released from the tape")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Frees the stored value of `v`. Only valid on inference tapes.
    pub fn release(&mut self, v: Var) {
        if !self.record {
            self.nodes[v.0].value = None;
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&vals)?;
        let rg = self.needs(inputs);
        Ok(self.push(y, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::pointwise::mul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, cache }, rg))
    }

    /// Batch norm; in train mode also returns the batch statistics so the
    /// caller can fold them into its running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (y, cache, stats) = ops::batch_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            mode,
        )?;
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, cache, mode }, rg);
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = ops::activation(self.value(x), kind);
        let rg = self.needs(&[x]);
        self.push(y, Op::Act { x, kind }, rg)
    }

    pub fn pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let pooled = ops::pool(self.value(x), spec)?;
        let rg = self.needs(&[x]);
        Ok(self.push(pooled.output, Op::Pool { x, spec, argmax: pooled.argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::GlobalAvgPool { x }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    /// Multiplies each sample of the batch by its own factor.
    pub fn scale_samples(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let y = ops::pointwise::scale_samples(self.value(x), &factors)?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::ScaleSamples { x, factors }, rg))
    }

    pub fn channel_rescale(&mut self, x: Var, gamma: Var, w: Var, b: Var) -> Result<Var> {
        let (y, cache) = ops::channel_rescale(
            self.value(x),
            self.value(gamma),
            self.value(w),
            self.value(b),
        )?;
        let rg = self.needs(&[x, gamma, w, b]);
        Ok(self.push(y, Op::ChannelRescale { x, gamma, w, b, cache }, rg))
    }

    /// Mean soft-target cross entropy; targets are constants.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        label_smoothing: f64,
    ) -> Result<Var> {
        let (loss, cache) =
            ops::softmax_cross_entropy(self.value(logits), targets, label_smoothing)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, cache }, rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.record {
            return Err(Error::InvalidArgument(
                "backward on an inference tape".to_string(),
            ));
        }
        let loss_shape = &self.nodes[loss.0].shape;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(loss_shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients::new(grads, &self.nodes));
        }
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (v, g) in self.local_grads(i, &dy)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients::new(grads, &self.nodes))
    }

    fn local_grads(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, spec } => {
                let g = conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *spec, dy)?;
                let mut v = vec![(*x, g.input), (*w, g.weight)];
                if let (Some(b), Some(gb)) = (b, g.bias) {
                    v.push((*b, gb));
                }
                v
            }
            Op::Concat { inputs } => {
                let channels: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[1]).collect();
                inputs.iter().copied().zip(split_channels(dy, &channels)?).collect()
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul(a, b) => vec![
                (*a, ops::pointwise::mul(dy, self.value(*b))?),
                (*b, ops::pointwise::mul(dy, self.value(*a))?),
            ],
            Op::LayerNorm { x, gamma, beta, cache } => {
                let g = layer_norm_backward(self.shape(*x), self.value(*gamma), cache, dy)?;
                vec![(*x, g.input), (*gamma, g.gamma), (*beta, g.beta)]
            }
            Op::BatchNorm { x, gamma, beta, cache, mode } => {
                let g = batch_norm_backward(self.shape(*x), self.value(*gamma), cache, *mode, dy)?;
                vec![(*x, g.input), (*gamma, g.gamma), (*beta, g.beta)]
            }
            Op::Act { x, kind } => vec![(*x, activation_backward(self.value(*x), *kind, dy))],
            Op::Pool { x, spec, argmax } => {
                vec![(*x, pool_backward(self.shape(*x), *spec, argmax, dy)?)]
            }
            Op::GlobalAvgPool { x } => vec![(*x, global_avg_pool_backward(self.shape(*x), dy))],
            Op::Linear { x, w, b } => {
                let g = linear_backward(self.value(*x), self.value(*w), b.is_some(), dy)?;
                let mut v = vec![(*x, g.input), (*w, g.weight)];
                if let (Some(b), Some(gb)) = (b, g.bias) {
                    v.push((*b, gb));
                }
                v
            }
            Op::Reshape { x } => vec![(*x, dy.clone().reshape(self.shape(*x).to_vec())?)],
            Op::ScaleSamples { x, factors } => {
                vec![(*x, ops::pointwise::scale_samples(dy, factors)?)]
            }
            Op::ChannelRescale { x, gamma, w, b, cache } => {
                let g = channel_rescale_backward(
                    self.value(*x),
                    self.value(*gamma),
                    self.value(*w),
                    cache,
                    dy,
                )?;
                vec![(*x, g.input), (*gamma, g.gamma), (*w, g.se_weight), (*b, g.se_bias)]
            }
            Op::CrossEntropy { logits, cache } => {
                let g = softmax_cross_entropy_backward(self.shape(*logits), cache, dy.data()[0]);
                vec![(*logits, g)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), dy.data()[0]))],
        };
        Ok(out)
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    fn new(grads: Vec<Option<Tensor<T>>>, nodes: &[Node<T>]) -> Self {
        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        }
    }

    /// Gradient for `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

//! Reverse-mode differentiation over whole-tensor ops.
//!
//! A [`Tape`] owns every value it records. Nodes are appended in evaluation
//! order, so node ids are already a topological order and the backward pass
//! is a single reverse sweep. Gradients accumulate additively into each
//! consumed node.

use crate::error::{Error, Result};
use crate::ops::conv::{gated_conv_backward, ConvGeometry, ConvGradRequest};
use crate::ops::{self, BnCache, BnConfig, Mode, PoolWindow, RunningStats};
use crate::scalar::Scalar;
use crate::switch::binarize;
use crate::tensor::{Kernel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Non-fatal conditions noticed while recording.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeEvent {
    /// A gated convolution ran with every switch off; its output is zero.
    AllSwitchesOff { node: NodeId, channels: usize },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { input: NodeId, kernel: NodeId, geo: ConvGeometry },
    MaskedConv { input: NodeId, kernel: NodeId, switches: NodeId, geo: ConvGeometry, mask: Vec<bool> },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache<T> },
    Relu { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    AvgPool { input: NodeId, window: PoolWindow },
    MaxPool { input: NodeId, argmax: Vec<usize> },
    Dense { input: NodeId, weight: NodeId, bias: NodeId },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor<T> },
    BinarizedMean { switches: NodeId },
    Affine { terms: Vec<(NodeId, T)> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { input, kernel, .. } => vec![*input, *kernel],
            Op::MaskedConv { input, kernel, switches, .. } => vec![*input, *kernel, *switches],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu { input } | Op::AvgPool { input, .. } | Op::MaxPool { input, .. } => vec![*input],
            Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::BinarizedMean { switches } => vec![*switches],
            Op::Affine { terms } => terms.iter().map(|(id, _)| *id).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    events: Vec<TapeEvent>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn events(&self) -> &[TapeEvent] {
        &self.events
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|id| self.nodes[id.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, requires_grad });
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(Error::MissingNode(id.0))
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.node(id)?.value)
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.len()));
        }
        Ok(v.data()[0])
    }

    /// Gradient of the last backward pass. Zero for nodes the loss does not reach.
    pub fn grad(&self, id: NodeId) -> Result<&Tensor<T>> {
        let node = self.node(id)?;
        node.grad.as_ref().ok_or(Error::Invalid(format!("backward has not run for node {}", id.0)))
    }

    pub fn take_grad(&mut self, id: NodeId) -> Result<Tensor<T>> {
        let z = Tensor::zeros(self.node(id)?.value.shape());
        Ok(self.nodes[id.0].grad.replace(z).unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape())))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (x, k) = (self.value(input)?, self.value(kernel)?);
        let geo = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let out = ops::conv2d_forward(x, &Kernel::new(k.clone())?, stride, padding)?;
        Ok(self.push(out, Op::Conv { input, kernel, geo }))
    }

    /// Convolution gated by `τ(switches)`; `switches` holds the real-valued
    /// relaxation `s̃`, one entry per input channel.
    pub fn masked_conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        switches: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (x, k, s) = (self.value(input)?, self.value(kernel)?, self.value(switches)?);
        let geo = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let mask = binarize(s.data());
        let out = ops::masked_conv_forward(x, &Kernel::new(k.clone())?, &mask, stride, padding)?;
        let channels = mask.len();
        let all_off = !mask.iter().any(|&b| b);
        let id = self.push(out, Op::MaskedConv { input, kernel, switches, geo, mask });
        if all_off {
            tracing::warn!(node = id.0, channels, "every switch of a gated convolution is off");
            self.events.push(TapeEvent::AllSwitchesOff { node: id, channels });
        }
        Ok(id)
    }

    /// Batch norm with learnable `gamma`/`beta` nodes. Running statistics live
    /// outside the tape and are updated in train mode.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut RunningStats<T>,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<NodeId> {
        let (out, cache) = ops::batchnorm_forward(
            self.value(input)?,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            stats,
            mode,
            cfg,
        )?;
        Ok(self.push(out, Op::BatchNorm { input, gamma, beta, cache }))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::relu_forward(self.value(input)?);
        Ok(self.push(out, Op::Relu { input }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs)?, self.value(rhs)?);
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add: {} vs {}", a.shape(), b.shape())));
        }
        let mut out = a.clone();
        out.axpy(T::one(), b);
        out.ensure_finite("add")?;
        Ok(self.push(out, Op::Add { lhs, rhs }))
    }

    pub fn avg_pool(&mut self, input: NodeId, window: PoolWindow) -> Result<NodeId> {
        let out = ops::avgpool2d_forward(self.value(input)?, window)?;
        Ok(self.push(out, Op::AvgPool { input, window }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let window = PoolWindow::global(self.value(input)?.shape());
        self.avg_pool(input, window)
    }

    pub fn max_pool(&mut self, input: NodeId, window: PoolWindow) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input)?, window)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::dense_forward(self.value(input)?, self.value(weight)?, self.value(bias)?.data())?;
        Ok(self.push(out, Op::Dense { input, weight, bias }))
    }

    /// Mean cross-entropy as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits)?, labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// Class probabilities computed by a cross-entropy node.
    pub fn probabilities(&self, loss: NodeId) -> Result<&Tensor<T>> {
        match self.ops.get(loss.0) {
            Some(Op::SoftmaxCe { probs, .. }) => Ok(probs),
            _ => Err(Error::Invalid(format!("node {} is not a cross-entropy node", loss.0))),
        }
    }

    /// Scalar mean of `τ(switches)`. The backward pass treats `τ` as the
    /// identity, so each switch receives `upstream / C`.
    pub fn binarized_mean(&mut self, switches: NodeId) -> Result<NodeId> {
        let s = self.value(switches)?;
        if s.is_empty() {
            return Err(Error::Invalid("mean of an empty switch vector".into()));
        }
        let on = binarize(s.data()).iter().filter(|&&b| b).count();
        let mean = T::of_usize(on) / T::of_usize(s.len());
        Ok(self.push(Tensor::scalar(mean), Op::BinarizedMean { switches }))
    }

    /// `Σ coeff_i · node_i + bias` over same-shaped nodes. The bias is folded
    /// into the stored value; it has no gradient.
    pub fn affine(&mut self, terms: &[(NodeId, T)], bias: T) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Invalid("affine combination of zero terms".into()));
        };
        let shape = self.value(first)?.shape();
        let mut out = Tensor::full(shape, bias);
        for &(id, coeff) in terms {
            let v = self.value(id)?;
            if v.shape() != shape {
                return Err(Error::Shape(format!("affine: {} vs {shape}", v.shape())));
            }
            out.axpy(coeff, v);
        }
        out.ensure_finite("affine")?;
        Ok(self.push(out, Op::Affine { terms: terms.to_vec() }))
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        match &mut grads[id.0] {
            Some(acc) => acc.axpy(T::one(), &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Fills the gradient of every node with respect to the scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let len = self.node(loss)?.value.len();
        if len != 1 {
            return Err(Error::NonScalarLoss(len));
        }
        self.backward_from(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: gradients of `⟨seed, output⟩` for every node.
    pub fn backward_from(&mut self, output: NodeId, seed: Tensor<T>) -> Result<()> {
        let shape = self.node(output)?.value.shape();
        if seed.shape() != shape {
            return Err(Error::Shape(format!("seed {} for output {shape}", seed.shape())));
        }
        let loss = output;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        let needs = |tape: &Self, id: NodeId| tape.nodes[id.0].requires_grad;

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Conv { input, kernel, geo } => {
                    let want = ConvGradRequest {
                        input: needs(self, *input),
                        kernel: needs(self, *kernel),
                        switches: false,
                    };
                    if want.input || want.kernel {
                        let ones = vec![T::one(); geo.kernel.w()];
                        let g = gated_conv_backward(
                            geo,
                            self.nodes[input.0].value.data(),
                            self.nodes[kernel.0].value.data(),
                            &ones,
                            up.data(),
                            want,
                        );
                        if let Some(d) = g.input {
                            Self::accumulate(&mut grads, *input, d);
                        }
                        if let Some(d) = g.kernel {
                            Self::accumulate(&mut grads, *kernel, d);
                        }
                    }
                }
                Op::MaskedConv { input, kernel, switches, geo, mask } => {
                    let want = ConvGradRequest {
                        input: needs(self, *input),
                        kernel: needs(self, *kernel),
                        switches: needs(self, *switches),
                    };
                    if want.input || want.kernel || want.switches {
                        let gate: Vec<T> = mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
                        let g = gated_conv_backward(
                            geo,
                            self.nodes[input.0].value.data(),
                            self.nodes[kernel.0].value.data(),
                            &gate,
                            up.data(),
                            want,
                        );
                        if let Some(d) = g.input {
                            Self::accumulate(&mut grads, *input, d);
                        }
                        if let Some(d) = g.kernel {
                            Self::accumulate(&mut grads, *kernel, d);
                        }
                        if let Some(d) = g.switches {
                            Self::accumulate(&mut grads, *switches, Tensor::vector(d));
                        }
                    }
                }
                Op::BatchNorm { input, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::batchnorm_backward(cache, self.nodes[gamma.0].value.data(), &up);
                    if needs(self, *input) {
                        Self::accumulate(&mut grads, *input, dx);
                    }
                    if needs(self, *gamma) {
                        Self::accumulate(&mut grads, *gamma, Tensor::vector(dg));
                    }
                    if needs(self, *beta) {
                        Self::accumulate(&mut grads, *beta, Tensor::vector(db));
                    }
                }
                Op::Relu { input } => {
                    if needs(self, *input) {
                        let d = ops::relu_backward(&self.nodes[input.0].value, &up);
                        Self::accumulate(&mut grads, *input, d);
                    }
                }
                Op::Add { lhs, rhs } => {
                    if needs(self, *rhs) {
                        Self::accumulate(&mut grads, *rhs, up.clone());
                    }
                    if needs(self, *lhs) {
                        Self::accumulate(&mut grads, *lhs, up.clone());
                    }
                }
                Op::AvgPool { input, window } => {
                    if needs(self, *input) {
                        let d = ops::avgpool2d_backward(self.nodes[input.0].value.shape(), *window, &up);
                        Self::accumulate(&mut grads, *input, d);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if needs(self, *input) {
                        let d = ops::maxpool2d_backward(self.nodes[input.0].value.shape(), argmax, &up);
                        Self::accumulate(&mut grads, *input, d);
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let (dx, dw, db) =
                        ops::dense_backward(&self.nodes[input.0].value, &self.nodes[weight.0].value, &up);
                    if needs(self, *input) {
                        Self::accumulate(&mut grads, *input, dx);
                    }
                    if needs(self, *weight) {
                        Self::accumulate(&mut grads, *weight, dw);
                    }
                    if needs(self, *bias) {
                        Self::accumulate(&mut grads, *bias, Tensor::vector(db));
                    }
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    if needs(self, *logits) {
                        let d = ops::softmax_cross_entropy_backward(probs, labels, up.data()[0]);
                        Self::accumulate(&mut grads, *logits, d);
                    }
                }
                Op::BinarizedMean { switches } => {
                    if needs(self, *switches) {
                        let shape = self.nodes[switches.0].value.shape();
                        let d = Tensor::full(shape, up.data()[0] / T::of_usize(shape.len()));
                        Self::accumulate(&mut grads, *switches, d);
                    }
                }
                Op::Affine { terms } => {
                    for &(id, coeff) in terms {
                        if needs(self, id) {
                            Self::accumulate(&mut grads, id, up.map(|g| g * coeff));
                        }
                    }
                }
            }
            grads[idx] = Some(up);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn loss_gradient_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn diamond_accumulates() {
        // y = 2x + 5x consumed through two branches
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let a = tape.affine(&[(x, 2.0)], 0.0).unwrap();
        let b = tape.affine(&[(x, 5.0)], 1.0).unwrap();
        let y = tape.add(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
        assert_eq!(tape.value(y).unwrap().data(), &[1.5 * 7.0 + 1.0]);
    }

    #[test]
    fn unreachable_node_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.affine(&[(x, 3.0)], 0.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn missing_node() {
        let mut tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(NodeId(4)), Err(Error::MissingNode(4))));
    }

    #[test]
    fn frozen_kernel_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(Shape4::new(1, 3, 3, 1), |i| i as f64));
        let k = tape.constant(Tensor::full(Shape4::new(3, 3, 1, 1), 0.5));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(k).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn all_off_switches_emit_event_and_zero_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape4::new(1, 3, 3, 2), 1.0));
        let k = tape.constant(Tensor::full(Shape4::new(3, 3, 2, 1), 1.0));
        let s = tape.param(Tensor::vector(vec![-1.0, 0.0]));
        let y = tape.masked_conv2d(x, k, s, 1, 1).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.events(), &[TapeEvent::AllSwitchesOff { node: y, channels: 2 }]);
    }

    #[test]
    fn straight_through_switch_gradient() {
        // L = s_c · a with a = 3 and s̃ = 0.001
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let k = tape.constant(Tensor::scalar(1.0));
        let s = tape.param(Tensor::vector(vec![0.001]));
        let y = tape.masked_conv2d(x, k, s, 1, 0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[3.0]);
    }
}

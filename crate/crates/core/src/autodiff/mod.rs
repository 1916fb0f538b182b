//! Minimal tape-based reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly when it is appended to the [`Graph`];
//! [`Graph::backward`] then walks the nodes in exact reverse insertion order,
//! so gradients are bit-identical across runs for identical inputs.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernels::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Sum(NodeId),
    HalfSquaredNorm(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    label: String,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros when `id` did not influence the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = format!("{}#{}", op_name(&op), id.0);
        self.nodes.push(Node {
            op,
            value,
            label,
            requires_grad,
        });
        id
    }

    fn needs(&self, ids: &[Option<NodeId>]) -> bool {
        ids.iter()
            .flatten()
            .any(|id| self.nodes[id.0].requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State("node does not belong to this graph"))
        }
    }

    /// Attach a human-readable label used in error messages.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = label.into();
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let (value, geometry) = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            value,
            rg,
        ))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        let value = kernels::dense_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|x| x.max(0.0));
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(Op::Relu(input), value, rg))
    }

    pub fn max_pool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        self.check(input)?;
        let (value, argmax) = kernels::max_pool_forward(self.value(input), size)?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(Op::MaxPool { input, argmax }, value, rg))
    }

    /// Collapse every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let v = self.value(input);
        let n = v.shape()[0];
        let value = v.clone().reshape(vec![n, v.len() / n])?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(Op::Reshape(input), value, rg))
    }

    /// Mean cross-entropy of `logits[N,K]` against `labels`, as a `[1]` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        if !self.value(logits).is_finite() {
            return Err(Error::NonFinite {
                layer: self.label(logits).to_string(),
            });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.needs(&[Some(logits)]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(Op::Sum(input), value, rg))
    }

    /// `0.5 * ||x||^2`
    pub fn half_squared_norm(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let v = self.value(input);
        let value = Tensor::scalar(0.5 * v.data().iter().map(|x| x * x).sum::<f64>());
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(Op::HalfSquaredNorm(input), value, rg))
    }

    /// Back-propagate from the scalar node `output`, scaled by `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward operation"));
        }
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(output).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(seed));

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(grad);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geometry,
                } => {
                    let want_input = self.nodes[input.0].requires_grad;
                    let g = kernels::conv2d_backward(
                        geometry,
                        self.value(*input),
                        self.value(*weight),
                        &grad,
                        want_input,
                    );
                    if let Some(gi) = g.input {
                        accumulate(&mut grads, *input, gi);
                    }
                    accumulate(&mut grads, *weight, g.weight);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, g.bias);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let want_input = self.nodes[input.0].requires_grad;
                    let (gi, gw, gb) = kernels::dense_backward(
                        self.value(*input),
                        self.value(*weight),
                        &grad,
                        want_input,
                    );
                    if let Some(gi) = gi {
                        accumulate(&mut grads, *input, gi);
                    }
                    accumulate(&mut grads, *weight, gw);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let mut g = grad;
                    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::MaxPool { input, argmax } => {
                    let mut g = Tensor::zeros(self.value(*input).shape());
                    let gd = g.data_mut();
                    for (&src, &go) in argmax.iter().zip(grad.data()) {
                        gd[src] += go;
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::Reshape(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, grad.reshape(shape)?);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let upstream = grad.data()[0];
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = upstream / n as f64;
                    let mut g = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        g[i * k + y] -= 1.0;
                    }
                    for v in &mut g {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![n, k], g)?);
                }
                Op::Sum(input) => {
                    let up = grad.data()[0];
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::full(self.value(*input).shape(), up),
                    );
                }
                Op::HalfSquaredNorm(input) => {
                    let up = grad.data()[0];
                    accumulate(&mut grads, *input, self.value(*input).map(|x| up * x));
                }
            }
        }

        // Only leaves keep their gradients; intermediate slots were consumed above.
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::Dense { .. } => "dense",
        Op::Relu(_) => "relu",
        Op::MaxPool { .. } => "max_pool2d",
        Op::Reshape(_) => "flatten",
        Op::SoftmaxCrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::HalfSquaredNorm(_) => "half_squared_norm",
    }
}

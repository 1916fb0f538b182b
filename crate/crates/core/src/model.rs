//! Reference network and its parameter container.
//!
//! `Conv(in→c1, 3×3, pad 1) → ReLU → MaxPool 2 → Conv(c1→c2, 3×3, pad 1) → ReLU
//! → MaxPool 2 → Dense → classes`. Every weight tensor is quantized and
//! penalized; biases are neither.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Quantized and regularized. Output channels run along axis 0.
    pub penalized: bool,
}

/// Ordered set of named parameter tensors (float `w` or dequantized `u`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub params: Vec<Parameter>,
}

impl LayerWeights {
    pub fn new(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    /// Convenience constructor: every tensor penalized, named `layer{i}`.
    pub fn from_layers(layers: Vec<Tensor>) -> Self {
        Self {
            params: layers
                .into_iter()
                .enumerate()
                .map(|(i, tensor)| Parameter {
                    name: format!("layer{i}"),
                    tensor,
                    penalized: true,
                })
                .collect(),
        }
    }

    pub fn penalized(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.penalized)
    }

    pub fn penalized_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut().filter(|p| p.penalized)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// Fraction of exact zeros over penalized tensors.
    pub fn zero_fraction(&self) -> f64 {
        let (zeros, total) = self.penalized().fold((0usize, 0usize), |(z, t), p| {
            (
                z + p.tensor.data().iter().filter(|&&x| x == 0.0).count(),
                t + p.tensor.len(),
            )
        });
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

pub const PARAM_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc.weight",
    "fc.bias",
];

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "images must be at least 4x4 for two 2x2 pools, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2
            || self.in_channels == 0
            || self.conv1_channels == 0
            || self.conv2_channels == 0
        {
            return Err(Error::Config(
                "architecture extents must be positive (classes >= 2)".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("convnet-{}-{}", self.conv1_channels, self.conv2_channels)
    }

    pub fn feature_len(&self) -> usize {
        self.conv2_channels * (self.height / 2 / 2) * (self.width / 2 / 2)
    }

    pub fn param_shapes(&self) -> [Vec<usize>; 6] {
        [
            vec![self.conv1_channels, self.in_channels, 3, 3],
            vec![self.conv1_channels],
            vec![self.conv2_channels, self.conv1_channels, 3, 3],
            vec![self.conv2_channels],
            vec![self.classes, self.feature_len()],
            vec![self.classes],
        ]
    }

    /// He-normal weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> LayerWeights {
        let params = PARAM_NAMES
            .iter()
            .zip(self.param_shapes())
            .map(|(name, shape)| {
                let penalized = name.ends_with(".weight");
                let tensor = if penalized {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
                } else {
                    Tensor::zeros(&shape)
                };
                Parameter {
                    name: name.to_string(),
                    tensor,
                    penalized,
                }
            })
            .collect();
        LayerWeights { params }
    }

    pub fn check_weights(&self, weights: &LayerWeights) -> Result<()> {
        let shapes = self.param_shapes();
        if weights.params.len() != shapes.len() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                weights.params.len()
            )));
        }
        for ((p, shape), name) in weights.params.iter().zip(&shapes).zip(PARAM_NAMES) {
            if p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Builds the forward graph. Parameters enter as differentiable leaves when
    /// `trainable`, otherwise as constants. Returns (parameter nodes, logits).
    fn build(
        &self,
        graph: &mut Graph,
        weights: &LayerWeights,
        images: Tensor,
        trainable: bool,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let x = graph.input(images);
        let ids: Vec<NodeId> = weights
            .params
            .iter()
            .map(|p| {
                let id = if trainable {
                    graph.param(p.tensor.clone())
                } else {
                    graph.input(p.tensor.clone())
                };
                graph.set_label(id, p.name.clone());
                id
            })
            .collect();
        let h = graph.conv2d(x, ids[0], Some(ids[1]), 1, 1)?;
        graph.set_label(h, "conv1");
        let h = graph.relu(h)?;
        let h = graph.max_pool2d(h, 2)?;
        let h = graph.conv2d(h, ids[2], Some(ids[3]), 1, 1)?;
        graph.set_label(h, "conv2");
        let h = graph.relu(h)?;
        let h = graph.max_pool2d(h, 2)?;
        let h = graph.flatten(h)?;
        let logits = graph.dense(h, ids[4], Some(ids[5]))?;
        graph.set_label(logits, "fc");
        Ok((ids, logits))
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        weights: &LayerWeights,
        images: Tensor,
        labels: &[usize],
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut graph = Graph::new();
        let (ids, logits) = self.build(&mut graph, weights, images, true)?;
        let loss = graph.softmax_cross_entropy(logits, labels)?;
        let value = graph.value(loss).data()[0];
        let mut grads = graph.backward(loss, 1.0)?;
        Ok((value, ids.iter().map(|&id| grads.take(id)).collect()))
    }

    pub fn logits(&self, weights: &LayerWeights, images: Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let (_, logits) = self.build(&mut graph, weights, images, false)?;
        Ok(graph.value(logits).clone())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn arch() -> Architecture {
        Architecture {
            in_channels: 1,
            height: 8,
            width: 8,
            classes: 4,
            conv1_channels: 4,
            conv2_channels: 6,
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = arch();
        let w1 = a.init(&mut ChaCha8Rng::seed_from_u64(3));
        let w2 = a.init(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(w1, w2);
        a.check_weights(&w1).unwrap();
        assert_eq!(w1.penalized().count(), 3);
        assert_eq!(w1.get("fc.weight").unwrap().tensor.shape(), &[4, 24]);
        assert!(w1
            .get("conv1.bias")
            .unwrap()
            .tensor
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn logits_match_training_graph() {
        let a = arch();
        let w = a.init(&mut ChaCha8Rng::seed_from_u64(4));
        let x = Tensor::new(
            vec![2, 1, 8, 8],
            (0..128).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let z = a.logits(&w, x.clone()).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        let (loss, grads) = a.loss_and_grads(&w, x, &[0, 3]).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.len(), 6);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn rejects_tiny_images() {
        let mut a = arch();
        a.height = 3;
        assert!(a.validate().is_err());
    }
}

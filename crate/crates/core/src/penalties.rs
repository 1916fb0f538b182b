//! Regularizers and their operators: ℓ1 shrinkage, channel-wise Group Lasso,
//! the splitting pull toward the quantized weights, and the complementary
//! transformed-ℓ1 (CTℓ1) layer penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerWeights;
use crate::tensor::Tensor;

/// Channels with a Euclidean norm at or below this get a zero GL subgradient.
pub const ZERO_CHANNEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// ℓ1 shrinkage threshold.
    pub lambda1: f64,
    /// Group Lasso weight.
    pub lambda2: f64,
    /// CTℓ1 weight.
    pub lambda3: f64,
    /// Splitting strength.
    pub beta: f64,
    /// CTℓ1 shape parameter.
    pub ctl1_a: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            beta: 0.0,
            ctl1_a: 1.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.ctl1_a > 0.0 && self.ctl1_a.is_finite()) {
            return Err(Error::Config(format!(
                "ctl1_a must be > 0, got {}",
                self.ctl1_a
            )));
        }
        Ok(())
    }
}

/// Soft-thresholding `sgn(x)·max(|x| − λ, 0)`.
pub fn shrink_scalar(x: f64, threshold: f64) -> f64 {
    if x.abs() <= threshold {
        0.0
    } else {
        x - threshold.copysign(x)
    }
}

pub fn shrink(x: &Tensor, threshold: f64) -> Result<Tensor> {
    check_threshold(threshold)?;
    Ok(x.map(|v| shrink_scalar(v, threshold)))
}

pub fn shrink_in_place(x: &mut Tensor, threshold: f64) -> Result<()> {
    check_threshold(threshold)?;
    for v in x.data_mut() {
        *v = shrink_scalar(*v, threshold);
    }
    Ok(())
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold >= 0.0 && threshold.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "threshold must be >= 0, got {threshold}"
        )))
    }
}

/// Channel groups of one penalized tensor: `channels` contiguous slices of `group_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub channels: usize,
    pub group_len: usize,
}

impl LayerGroups {
    /// One group per output channel (axis 0).
    pub fn of(t: &Tensor) -> Self {
        let channels = t.shape()[0];
        Self {
            channels,
            group_len: t.len() / channels,
        }
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.channels).map(|c| c * self.group_len..(c + 1) * self.group_len)
    }
}

/// Per-layer channel groups for every penalized tensor, in parameter order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    pub layers: Vec<LayerGroups>,
}

impl ChannelPartition {
    pub fn output_channels(w: &LayerWeights) -> Self {
        Self {
            layers: w.penalized().map(|p| LayerGroups::of(&p.tensor)).collect(),
        }
    }

    pub fn check(&self, w: &LayerWeights) -> Result<()> {
        let penalized: Vec<_> = w.penalized().collect();
        if penalized.len() != self.layers.len() {
            return Err(Error::Argument(format!(
                "partition has {} layers, weights have {}",
                self.layers.len(),
                penalized.len()
            )));
        }
        for (p, g) in penalized.iter().zip(&self.layers) {
            if g.channels * g.group_len != p.tensor.len() {
                return Err(Error::Argument(format!(
                    "partition of {} covers {} of {} weights",
                    p.name,
                    g.channels * g.group_len,
                    p.tensor.len()
                )));
            }
        }
        Ok(())
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|g| g.channels).sum()
    }
}

fn channel_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `Σ_c ‖w_c‖₂` over the channels of one tensor.
pub fn group_lasso_layer(t: &Tensor, groups: LayerGroups) -> f64 {
    groups.ranges().map(|r| channel_norm(&t.data()[r])).sum()
}

pub fn group_lasso_layer_grad(t: &Tensor, groups: LayerGroups) -> Tensor {
    let mut g = Tensor::zeros(t.shape());
    for r in groups.ranges() {
        let norm = channel_norm(&t.data()[r.clone()]);
        if norm > ZERO_CHANNEL_EPS {
            for i in r {
                g.data_mut()[i] = t.data()[i] / norm;
            }
        }
    }
    g
}

pub fn group_lasso_layer_prox(t: &Tensor, threshold: f64, groups: LayerGroups) -> Result<Tensor> {
    check_threshold(threshold)?;
    let mut out = t.clone();
    for r in groups.ranges() {
        let norm = channel_norm(&t.data()[r.clone()]);
        let factor = if norm > 0.0 {
            (1.0 - threshold / norm).max(0.0)
        } else {
            0.0
        };
        for v in &mut out.data_mut()[r] {
            *v *= factor;
        }
    }
    Ok(out)
}

pub fn group_lasso_value(w: &LayerWeights, partition: &ChannelPartition) -> Result<f64> {
    partition.check(w)?;
    Ok(w.penalized()
        .zip(&partition.layers)
        .map(|(p, &g)| group_lasso_layer(&p.tensor, g))
        .sum())
}

/// Subgradient per penalized tensor, in parameter order.
pub fn group_lasso_subgrad(w: &LayerWeights, partition: &ChannelPartition) -> Result<Vec<Tensor>> {
    partition.check(w)?;
    Ok(w.penalized()
        .zip(&partition.layers)
        .map(|(p, &g)| group_lasso_layer_grad(&p.tensor, g))
        .collect())
}

/// Block soft-thresholding of every channel; non-penalized tensors are untouched.
pub fn group_lasso_prox(
    w: &LayerWeights,
    threshold: f64,
    partition: &ChannelPartition,
) -> Result<LayerWeights> {
    partition.check(w)?;
    let mut out = w.clone();
    for (p, &g) in out.penalized_mut().zip(&partition.layers) {
        p.tensor = group_lasso_layer_prox(&p.tensor, threshold, g)?;
    }
    Ok(out)
}

fn check_shape_param(a: f64) -> Result<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "CTL1 shape parameter must be > 0, got {a}"
        )))
    }
}

/// `1 − ‖w‖₁ / (a + ‖w‖₁)` for one layer.
pub fn ctl1_layer(t: &Tensor, a: f64) -> Result<f64> {
    check_shape_param(a)?;
    Ok(a / (a + t.l1_norm()))
}

/// `−a·sgn(wᵢ)/(a + ‖w‖₁)²`, zero at `wᵢ = 0`.
pub fn ctl1_layer_grad(t: &Tensor, a: f64) -> Result<Tensor> {
    check_shape_param(a)?;
    let denom = a + t.l1_norm();
    let scale = -a / (denom * denom);
    Ok(t.map(|v| if v == 0.0 { 0.0 } else { scale * v.signum() }))
}

pub fn ctl1_value(w: &LayerWeights, a: f64) -> Result<f64> {
    w.penalized().map(|p| ctl1_layer(&p.tensor, a)).sum()
}

pub fn ctl1_grad(w: &LayerWeights, a: f64) -> Result<Vec<Tensor>> {
    w.penalized()
        .map(|p| ctl1_layer_grad(&p.tensor, a))
        .collect()
}

/// `w − γβ(w − u)`. Requires `0 ≤ γβ ≤ 1`.
pub fn splitting_step(w: &Tensor, u: &Tensor, lr: f64, beta: f64) -> Result<Tensor> {
    let mut out = w.clone();
    splitting_step_in_place(&mut out, u, lr * beta)?;
    Ok(out)
}

pub fn splitting_step_in_place(w: &mut Tensor, u: &Tensor, rate: f64) -> Result<()> {
    w.same_shape(u, "splitting_step")?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "splitting rate lr*beta must be in [0, 1], got {rate}"
        )));
    }
    if rate == 1.0 {
        w.data_mut().copy_from_slice(u.data());
        return Ok(());
    }
    for (x, &y) in w.data_mut().iter_mut().zip(u.data()) {
        *x -= rate * (*x - y);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn layer(values: Vec<f64>, shape: Vec<usize>) -> LayerWeights {
        LayerWeights::from_layers(vec![Tensor::new(shape, values).unwrap()])
    }

    #[test]
    fn shrink_direct_formula() {
        assert!((shrink_scalar(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(shrink_scalar(-0.3, 0.5), 0.0);
        assert!((shrink_scalar(-1.2, 0.5) + 0.7).abs() < 1e-15);
        let x = Tensor::from_vec(vec![0.4, -3.0, 0.0, 1e-9]);
        assert_eq!(shrink(&x, 0.0).unwrap(), x);
        assert!(shrink(&x, -0.1).is_err());
    }

    #[test]
    fn shrink_zero_iff_below_threshold() {
        let x = Tensor::from_vec(vec![0.5, -0.5, 0.50001, -0.7, 0.1]);
        let y = shrink(&x, 0.5).unwrap();
        let zero: Vec<bool> = y.data().iter().map(|v| *v == 0.0).collect();
        assert_eq!(zero, vec![true, true, false, false, true]);
    }

    #[test]
    fn group_lasso_value_and_subgrad() {
        let w = layer(vec![3.0, 4.0, 0.0, 0.0], vec![2, 2]);
        let p = ChannelPartition::output_channels(&w);
        assert_eq!(group_lasso_value(&w, &p).unwrap(), 5.0);
        let g = group_lasso_subgrad(&w, &p).unwrap();
        assert_eq!(g[0].data(), &[0.6, 0.8, 0.0, 0.0]);
        let z = layer(vec![0.0; 6], vec![3, 2]);
        assert_eq!(
            group_lasso_value(&z, &ChannelPartition::output_channels(&z)).unwrap(),
            0.0
        );
    }

    #[test]
    fn group_lasso_prox_scales_or_kills() {
        let w = layer(vec![3.0, 4.0, 0.3, 0.4], vec![2, 2]);
        let p = ChannelPartition::output_channels(&w);
        let out = group_lasso_prox(&w, 1.0, &p).unwrap();
        let d = out.params[0].tensor.data();
        assert!((d[0] - 2.4).abs() < 1e-12 && (d[1] - 3.2).abs() < 1e-12);
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn partition_must_cover_weights() {
        let w = layer(vec![1.0; 6], vec![3, 2]);
        let bad = ChannelPartition {
            layers: vec![LayerGroups {
                channels: 2,
                group_len: 2,
            }],
        };
        assert!(group_lasso_value(&w, &bad).is_err());
    }

    #[test]
    fn ctl1_closed_forms() {
        let a = 0.7;
        assert_eq!(ctl1_layer(&Tensor::zeros(&[4]), a).unwrap(), 1.0);
        let mid = Tensor::from_vec(vec![0.3, -0.4]);
        assert!((ctl1_layer(&mid, 0.7).unwrap() - 0.5).abs() < 1e-15);
        let big = Tensor::from_vec(vec![1e6 * a]);
        assert!(ctl1_layer(&big, a).unwrap() < 1.1e-6);
        assert!(ctl1_layer(&mid, 0.0).is_err());
        assert!(ctl1_layer(&mid, -1.0).is_err());
    }

    #[test]
    fn ctl1_gradient_closed_form() {
        let g = ctl1_layer_grad(&Tensor::from_vec(vec![2.0]), 1.0).unwrap();
        assert!((g.data()[0] + 1.0 / 9.0).abs() < 1e-15);
        let g = ctl1_layer_grad(&Tensor::from_vec(vec![-2.0, 0.0]), 1.0).unwrap();
        assert!((g.data()[0] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn splitting_fixed_points_and_errors() {
        let w = Tensor::from_vec(vec![1.0, -2.0]);
        let u = Tensor::from_vec(vec![0.5, 0.0]);
        assert_eq!(splitting_step(&w, &w, 0.1, 3.0).unwrap(), w);
        assert_eq!(splitting_step(&w, &u, 0.5, 2.0).unwrap(), u);
        assert!(splitting_step(&w, &u, 0.5, 2.5).is_err());
        assert!(splitting_step(&w, &Tensor::from_vec(vec![1.0]), 0.1, 0.1).is_err());
    }

    #[test]
    fn splitting_contracts_distance_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let w = Tensor::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
            let u = Tensor::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (lr, beta) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let out = splitting_step(&w, &u, lr, beta).unwrap();
            let mut diff_before = w.clone();
            diff_before.axpy(-1.0, &u).unwrap();
            let mut diff_after = out.clone();
            diff_after.axpy(-1.0, &u).unwrap();
            let expected = (1.0 - lr * beta) * diff_before.l2_norm();
            assert!((diff_after.l2_norm() - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn shrink_contracts_toward_zero(x in prop::collection::vec(-10.0f64..10.0, 1..20), lambda in 0.0f64..5.0) {
            let t = Tensor::from_vec(x);
            let y = shrink(&t, lambda).unwrap();
            for (a, b) in t.data().iter().zip(y.data()) {
                prop_assert!(b.abs() <= a.abs());
            }
        }

        #[test]
        fn group_prox_keeps_direction(x in prop::collection::vec(-3.0f64..3.0, 6), lambda in 0.0f64..2.0) {
            let w = layer(x, vec![2, 3]);
            let p = ChannelPartition::output_channels(&w);
            let out = group_lasso_prox(&w, lambda, &p).unwrap();
            for r in p.layers[0].ranges() {
                let a = &w.params[0].tensor.data()[r.clone()];
                let b = &out.params[0].tensor.data()[r];
                let nb = channel_norm(b);
                if nb > 0.0 {
                    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (channel_norm(a) * nb);
                    prop_assert!((cos - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn ctl1_decreases_when_a_magnitude_grows(
            x in prop::collection::vec(-3.0f64..3.0, 1..10),
            idx in 0usize..10,
            bump in 1e-3f64..1.0,
            a in 0.01f64..5.0,
        ) {
            let t = Tensor::from_vec(x.clone());
            let mut y = x;
            let i = idx % y.len();
            y[i] = if y[i] < 0.0 { y[i] - bump } else { y[i] + bump };
            let before = ctl1_layer(&t, a).unwrap();
            let after = ctl1_layer(&Tensor::from_vec(y), a).unwrap();
            prop_assert!(after < before);
        }

        #[test]
        fn splitting_decreases_gap(
            w in prop::collection::vec(-3.0f64..3.0, 1..10),
            rate in 0.01f64..0.99,
            shift in 0.01f64..1.0,
        ) {
            let u: Vec<f64> = w.iter().map(|v| v + shift).collect();
            let (w, u) = (Tensor::from_vec(w), Tensor::from_vec(u));
            let out = splitting_step(&w, &u, rate, 1.0).unwrap();
            let gap = |a: &Tensor| a.data().iter().zip(u.data()).map(|(x, y)| 0.5 * (x - y).powi(2)).sum::<f64>();
            prop_assert!(gap(&out) < gap(&w));
        }

        #[test]
        fn penalties_finite_and_nonnegative(x in prop::collection::vec(-1e3f64..1e3, 4), a in 1e-3f64..10.0) {
            let w = layer(x, vec![2, 2]);
            let p = ChannelPartition::output_channels(&w);
            let gl = group_lasso_value(&w, &p).unwrap();
            let ct = ctl1_value(&w, a).unwrap();
            prop_assert!(gl.is_finite() && gl >= 0.0);
            prop_assert!(ct.is_finite() && ct > 0.0 && ct <= 1.0);
        }
    }
}

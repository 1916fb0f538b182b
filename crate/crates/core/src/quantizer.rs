//! Projection onto `ℝ × {0, ±1, …, ±2^(m-1)}ⁿ`: one positive scale per layer
//! times integer codes.
//!
//! [`project_layer`] returns the least-squares optimal `(scale, codes)` pair.
//! For a fixed code vector the best scale is `⟨w,c⟩/⟨c,c⟩`, leaving residual
//! `‖w‖² − ⟨w,c⟩²/⟨c,c⟩`. As the inverse scale `t = 1/α` sweeps from 0 to ∞
//! the rounded codes only change at the breakpoints `t = (k + ½)/|wᵢ|`, so the
//! optimum is the best of the `n·2^(m-1)` code vectors visited by the sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, Parameter};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
/// Codes are stored as `i8`, so the largest level `2^(m-1)` must fit.
pub const MAX_BITS: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    /// Global least-squares optimum via the breakpoint sweep.
    #[default]
    Exact,
    /// Alternate nearest-level rounding and closed-form rescaling.
    Alternating { rounds: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec {
    bits: u8,
    pub method: ProjectionMethod,
    /// Last scale used per layer name; reused when a layer is entirely zero.
    pub scales: BTreeMap<String, f64>,
}

impl QuantSpec {
    pub fn new(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self {
            bits,
            method: ProjectionMethod::Exact,
            scales: BTreeMap::new(),
        })
    }

    pub fn with_method(mut self, method: ProjectionMethod) -> Self {
        self.method = method;
        self
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// `2^(m-1)`
    pub fn max_level(&self) -> i32 {
        max_level(self.bits)
    }

    /// `{0, ±1, …, ±2^(m-1)}` in ascending order.
    pub fn levels(&self) -> Vec<i32> {
        let k = self.max_level();
        (-k..=k).collect()
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bits must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
        )))
    }
}

pub fn max_level(bits: u8) -> i32 {
    1 << (bits - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub shape: Vec<usize>,
    pub scale: f64,
    pub codes: Vec<i8>,
}

impl QuantizedLayer {
    pub fn dequantize(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.codes
                .iter()
                .map(|&c| self.scale * f64::from(c))
                .collect(),
        )
        .expect("codes match shape")
    }

    pub fn zero_codes(&self) -> usize {
        self.codes.iter().filter(|&&c| c == 0).count()
    }

    pub fn residual(&self, w: &Tensor) -> f64 {
        residual(w.data(), self.scale, &self.codes)
    }
}

pub fn residual(w: &[f64], scale: f64, codes: &[i8]) -> f64 {
    w.iter()
        .zip(codes)
        .map(|(&x, &c)| {
            let d = x - scale * f64::from(c);
            d * d
        })
        .sum()
}

/// Nearest level to `x`, clamped to `±max_level`; exact half-way ties round toward zero.
pub fn nearest_level(x: f64, max_level: i32) -> i8 {
    let q = x.abs();
    let floor = q.floor();
    let mag = if q - floor > 0.5 { floor + 1.0 } else { floor };
    let mag = mag.min(f64::from(max_level)) as i8;
    if x < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Codes for a fixed scale.
pub fn project_with_scale(w: &Tensor, scale: f64, bits: u8) -> QuantizedLayer {
    let k = max_level(bits);
    QuantizedLayer {
        shape: w.shape().to_vec(),
        scale,
        codes: w
            .data()
            .iter()
            .map(|&x| nearest_level(x / scale, k))
            .collect(),
    }
}

/// Projects one layer. `previous_scale` is kept when `w` is entirely zero
/// (falls back to 1 on the very first projection).
pub fn project_layer(w: &Tensor, bits: u8, previous_scale: Option<f64>) -> Result<QuantizedLayer> {
    check_bits(bits)?;
    if !w.is_finite() {
        return Err(Error::Argument("cannot project non-finite weights".into()));
    }
    Ok(match exact_fit(w.data(), max_level(bits)) {
        Some((scale, codes)) => QuantizedLayer {
            shape: w.shape().to_vec(),
            scale,
            codes,
        },
        None => zero_layer(w, previous_scale),
    })
}

fn zero_layer(w: &Tensor, previous_scale: Option<f64>) -> QuantizedLayer {
    QuantizedLayer {
        shape: w.shape().to_vec(),
        scale: previous_scale.filter(|s| *s > 0.0).unwrap_or(1.0),
        codes: vec![0; w.len()],
    }
}

fn exact_fit(w: &[f64], k: i32) -> Option<(f64, Vec<i8>)> {
    let nz: Vec<(f64, usize)> = w
        .iter()
        .enumerate()
        .filter(|(_, x)| **x != 0.0)
        .map(|(i, x)| (x.abs(), i))
        .collect();
    if nz.is_empty() {
        return None;
    }
    let mut events: Vec<(f64, u32)> = Vec::with_capacity(nz.len() * k as usize);
    for (slot, &(mag, _)) in nz.iter().enumerate() {
        for level in 0..k {
            events.push(((f64::from(level) + 0.5) / mag, slot as u32));
        }
    }
    events.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut levels = vec![0i32; nz.len()];
    let (mut s_wc, mut s_cc) = (0.0f64, 0.0f64);
    let mut best = (0.0f64, 0usize, 0.0f64, 0.0f64); // score, events consumed, s_wc, s_cc
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let slot = events[i].1 as usize;
            s_wc += nz[slot].0;
            s_cc += f64::from(2 * levels[slot] + 1);
            levels[slot] += 1;
            i += 1;
        }
        let score = s_wc * s_wc / s_cc;
        // Relative margin keeps the coarsest representation among numerically equal optima.
        if score > best.0 * (1.0 + 1e-12) {
            best = (score, i, s_wc, s_cc);
        }
    }

    let mut codes_mag = vec![0i32; nz.len()];
    for &(_, slot) in &events[..best.1] {
        codes_mag[slot as usize] += 1;
    }
    let mut codes = vec![0i8; w.len()];
    for (slot, &(_, idx)) in nz.iter().enumerate() {
        let m = codes_mag[slot] as i8;
        codes[idx] = if w[idx] < 0.0 { -m } else { m };
    }
    Some((best.2 / best.3, codes))
}

/// Per-round record of an alternating projection.
#[derive(Debug, Clone)]
pub struct AlternatingTrace {
    /// Residual after every half-step (code update, then scale update, ...).
    pub residuals: Vec<f64>,
}

/// Alternating minimization started at `α₀ = mean|w| / mean(1..=2^(m-1))`.
/// Stops after `rounds` rounds or once the scale moves less than 1e-6 relative.
pub fn alternating_projection(
    w: &Tensor,
    bits: u8,
    rounds: u32,
    previous_scale: Option<f64>,
) -> Result<(QuantizedLayer, AlternatingTrace)> {
    check_bits(bits)?;
    if !w.is_finite() {
        return Err(Error::Argument("cannot project non-finite weights".into()));
    }
    let mut trace = AlternatingTrace { residuals: vec![] };
    let k = max_level(bits);
    let mean_abs = w.l1_norm() / w.len() as f64;
    if mean_abs == 0.0 {
        return Ok((zero_layer(w, previous_scale), trace));
    }
    let mean_level = (f64::from(k) + 1.0) / 2.0;
    let mut scale = mean_abs / mean_level;
    let mut layer = project_with_scale(w, scale, bits);
    trace.residuals.push(layer.residual(w));
    for _ in 0..rounds.max(1) {
        let (wc, cc) = w
            .data()
            .iter()
            .zip(&layer.codes)
            .fold((0.0, 0.0), |(wc, cc), (&x, &c)| {
                let c = f64::from(c);
                (wc + x * c, cc + c * c)
            });
        if cc == 0.0 {
            break;
        }
        let next = wc / cc;
        let converged = (next - scale).abs() < 1e-6 * scale;
        scale = next;
        layer.scale = scale;
        trace.residuals.push(layer.residual(w));
        layer = project_with_scale(w, scale, bits);
        trace.residuals.push(layer.residual(w));
        if converged {
            break;
        }
    }
    Ok((layer, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantizedParam {
    Quantized {
        name: String,
        layer: QuantizedLayer,
    },
    /// Parameters outside the quantized subspace (biases).
    Float {
        name: String,
        tensor: Tensor,
    },
}

impl QuantizedParam {
    pub fn name(&self) -> &str {
        match self {
            QuantizedParam::Quantized { name, .. } | QuantizedParam::Float { name, .. } => name,
        }
    }
}

/// The quantized model `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeights {
    pub params: Vec<QuantizedParam>,
}

impl QuantizedWeights {
    pub fn layers(&self) -> impl Iterator<Item = (&str, &QuantizedLayer)> {
        self.params.iter().filter_map(|p| match p {
            QuantizedParam::Quantized { name, layer } => Some((name.as_str(), layer)),
            QuantizedParam::Float { .. } => None,
        })
    }

    pub fn dequantize(&self) -> LayerWeights {
        LayerWeights::new(
            self.params
                .iter()
                .map(|p| match p {
                    QuantizedParam::Quantized { name, layer } => Parameter {
                        name: name.clone(),
                        tensor: layer.dequantize(),
                        penalized: true,
                    },
                    QuantizedParam::Float { name, tensor } => Parameter {
                        name: name.clone(),
                        tensor: tensor.clone(),
                        penalized: false,
                    },
                })
                .collect(),
        )
    }
}

/// Projects every penalized tensor and records the scales in `spec`.
pub fn project_all(w: &LayerWeights, spec: &mut QuantSpec) -> Result<QuantizedWeights> {
    let mut params = Vec::with_capacity(w.params.len());
    for p in &w.params {
        if !p.penalized {
            params.push(QuantizedParam::Float {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
            });
            continue;
        }
        let previous = spec.scales.get(&p.name).copied();
        let layer = match spec.method {
            ProjectionMethod::Exact => project_layer(&p.tensor, spec.bits, previous)?,
            ProjectionMethod::Alternating { rounds } => {
                alternating_projection(&p.tensor, spec.bits, rounds, previous)?.0
            }
        };
        spec.scales.insert(p.name.clone(), layer.scale);
        params.push(QuantizedParam::Quantized {
            name: p.name.clone(),
            layer,
        });
    }
    Ok(QuantizedWeights { params })
}

/// Projects with the scales already recorded in `spec` (layers without one are fitted).
pub fn project_all_frozen(w: &LayerWeights, spec: &QuantSpec) -> Result<QuantizedWeights> {
    let mut params = Vec::with_capacity(w.params.len());
    for p in &w.params {
        if !p.penalized {
            params.push(QuantizedParam::Float {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
            });
            continue;
        }
        let layer = match spec.scales.get(&p.name) {
            Some(&scale) => project_with_scale(&p.tensor, scale, spec.bits),
            None => project_layer(&p.tensor, spec.bits, None)?,
        };
        params.push(QuantizedParam::Quantized {
            name: p.name.clone(),
            layer,
        });
    }
    Ok(QuantizedWeights { params })
}

//! Learning-rate and penalty schedules.
//!
//! Two variants:
//! - `table1`: λ₁, λ₂ and β are multiplied cumulatively by their own factors
//!   at the penalty milestones, independently of the learning rate.
//! - `lr-coupled`: base values stay constant and the effective coefficients
//!   are γᵗ·λ₁, γᵗ·λ₂, γᵗ·β, with CTℓ1 shape γᵗ·a.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::PenaltyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleVariant {
    Table1,
    LrCoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub variant: ScheduleVariant,
    pub initial_lr: f64,
    pub lr_factor: f64,
    /// Epochs (1-based) at which the learning rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub penalty_milestones: Vec<usize>,
    /// Factor for λ₁ and λ₂ at each penalty milestone.
    pub lambda_factors: Vec<f64>,
    /// Factor for β at each penalty milestone.
    pub beta_factors: Vec<f64>,
}

/// Epoch budget the reference milestones are expressed in.
pub const REFERENCE_EPOCHS: usize = 200;

impl ScheduleConfig {
    /// The 200-epoch reference schedule: γ¹ = 0.1, ×0.1 at 80/120/160; penalty
    /// factors at 35/70/110/150.
    pub fn reference(variant: ScheduleVariant) -> Self {
        Self {
            variant,
            initial_lr: 0.1,
            lr_factor: 0.1,
            lr_milestones: vec![80, 120, 160],
            penalty_milestones: vec![35, 70, 110, 150],
            lambda_factors: vec![0.5, 0.2, 0.5, 0.5],
            beta_factors: vec![0.5, 0.2, 0.1, 0.1],
        }
    }

    /// Rescales milestones from a `reference`-epoch budget to `epochs`, rounding to nearest
    /// (at least epoch 1).
    pub fn scaled(&self, reference: usize, epochs: usize) -> Result<Self> {
        if reference == 0 {
            return Err(Error::Config("reference_epochs must be >= 1".into()));
        }
        let scale = |ms: &[usize]| -> Vec<usize> {
            ms.iter()
                .map(|&m| ((m * epochs) as f64 / reference as f64).round().max(1.0) as usize)
                .collect()
        };
        let out = Self {
            lr_milestones: scale(&self.lr_milestones),
            penalty_milestones: scale(&self.penalty_milestones),
            ..self.clone()
        };
        out.validate(epochs)?;
        Ok(out)
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        let increasing = |name: &str, ms: &[usize]| -> Result<()> {
            // Equal entries stack; short budgets squeeze rescaled milestones together.
            if ms.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config(format!(
                    "{name} must be non-decreasing, got {ms:?}"
                )));
            }
            if let Some(&m) = ms.iter().find(|&&m| m == 0 || m > epochs) {
                return Err(Error::Config(format!(
                    "{name} entry {m} must lie in 1..={epochs}"
                )));
            }
            Ok(())
        };
        increasing("lr_milestones", &self.lr_milestones)?;
        increasing("penalty_milestones", &self.penalty_milestones)?;
        if self.lambda_factors.len() != self.penalty_milestones.len()
            || self.beta_factors.len() != self.penalty_milestones.len()
        {
            return Err(Error::Config(
                "lambda_factors and beta_factors need one entry per penalty milestone".into(),
            ));
        }
        let factors = std::iter::once(self.lr_factor)
            .chain(self.lambda_factors.iter().copied())
            .chain(self.beta_factors.iter().copied());
        for f in factors {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "schedule factors must lie in (0, 1], got {f}"
                )));
            }
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be > 0, got {}",
                self.initial_lr
            )));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|&&m| epoch >= m)
            .fold(self.initial_lr, |lr, _| lr * self.lr_factor)
    }

    fn cumulative(&self, factors: &[f64], epoch: usize) -> f64 {
        self.penalty_milestones
            .iter()
            .zip(factors)
            .filter(|(&m, _)| epoch >= m)
            .fold(1.0, |acc, (_, &f)| acc * f)
    }
}

/// Parameter values in force during one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: usize,
    pub variant: ScheduleVariant,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    pub ctl1_a: f64,
}

impl ScheduleState {
    pub fn shrink_threshold(&self) -> f64 {
        match self.variant {
            ScheduleVariant::Table1 => self.lambda1,
            ScheduleVariant::LrCoupled => self.lr * self.lambda1,
        }
    }

    /// Weight of the Group Lasso term inside the differentiated objective.
    pub fn gl_weight(&self) -> f64 {
        match self.variant {
            ScheduleVariant::Table1 => self.lambda2,
            ScheduleVariant::LrCoupled => self.lr * self.lambda2,
        }
    }

    pub fn ctl1_weight(&self) -> f64 {
        self.lambda3
    }

    pub fn ctl1_shape(&self) -> f64 {
        match self.variant {
            ScheduleVariant::Table1 => self.ctl1_a,
            ScheduleVariant::LrCoupled => self.lr * self.ctl1_a,
        }
    }

    /// Blend factor γᵗβᵗ of the splitting step.
    pub fn split_rate(&self) -> f64 {
        self.lr * self.beta
    }
}

pub fn schedule_table1(cfg: &ScheduleConfig, base: &PenaltyConfig, epoch: usize) -> ScheduleState {
    let lf = cfg.cumulative(&cfg.lambda_factors, epoch);
    ScheduleState {
        epoch,
        variant: ScheduleVariant::Table1,
        lr: cfg.lr(epoch),
        lambda1: base.lambda1 * lf,
        lambda2: base.lambda2 * lf,
        lambda3: base.lambda3,
        beta: base.beta * cfg.cumulative(&cfg.beta_factors, epoch),
        ctl1_a: base.ctl1_a,
    }
}

pub fn schedule_lr_coupled(
    cfg: &ScheduleConfig,
    base: &PenaltyConfig,
    epoch: usize,
) -> ScheduleState {
    ScheduleState {
        epoch,
        variant: ScheduleVariant::LrCoupled,
        lr: cfg.lr(epoch),
        lambda1: base.lambda1,
        lambda2: base.lambda2,
        lambda3: base.lambda3,
        beta: base.beta,
        ctl1_a: base.ctl1_a,
    }
}

pub fn schedule(cfg: &ScheduleConfig, base: &PenaltyConfig, epoch: usize) -> ScheduleState {
    match cfg.variant {
        ScheduleVariant::Table1 => schedule_table1(cfg, base, epoch),
        ScheduleVariant::LrCoupled => schedule_lr_coupled(cfg, base, epoch),
    }
}

//! Run configuration: a sectioned `key = value` file (TOML syntax).
//!
//! ```toml
//! [run]
//! algorithm = "apgdssm"
//! seed = 7
//! epochs = 40
//!
//! [penalty]
//! lambda1 = 1e-4
//! ```
//!
//! Unknown keys are rejected, all of them listed in one error.
//! Schedule milestones are written against `reference_epochs` and rescaled
//! to the run's epoch budget.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_cifar_binary, load_idx, normalize_splits, synth_blobs, CifarLayout, Dataset, Split,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::penalties::PenaltyConfig;
use crate::quantizer::ProjectionMethod;
use crate::schedule::{ScheduleConfig, ScheduleVariant, REFERENCE_EPOCHS};
use crate::trainer::{Algorithm, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bits: u8,
    /// 0 selects the exact projection; n > 0 runs n alternating rounds.
    pub alternating_rounds: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Apgdssm,
            seed: 0,
            epochs: 40,
            batch_size: 32,
            bits: 4,
            alternating_rounds: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            conv1_channels: 16,
            conv2_channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    /// Defaults to the algorithm's own schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<ScheduleVariant>,
    pub reference_epochs: usize,
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub lr_milestones: Vec<usize>,
    pub penalty_milestones: Vec<usize>,
    pub lambda_factors: Vec<f64>,
    pub beta_factors: Vec<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let r = ScheduleConfig::reference(ScheduleVariant::Table1);
        Self {
            variant: None,
            reference_epochs: REFERENCE_EPOCHS,
            initial_lr: r.initial_lr,
            lr_factor: r.lr_factor,
            lr_milestones: r.lr_milestones,
            penalty_milestones: r.penalty_milestones,
            lambda_factors: r.lambda_factors,
            beta_factors: r.beta_factors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Idx,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub source: DataSource,
    // synthetic
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub snr: f64,
    pub data_seed: u64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    // file-backed
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 4,
            channels: 1,
            image_size: 8,
            snr: 1.0,
            data_seed: 0,
            train_per_class: 500,
            eval_per_class: 100,
            train_images: None,
            train_labels: None,
            eval_images: None,
            eval_labels: None,
            train_limit: None,
            eval_limit: None,
        }
    }
}

impl DataSection {
    fn path(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.clone().ok_or_else(|| {
            Error::Config(format!(
                "data.{key} is required for source {:?}",
                self.source
            ))
        })
    }

    /// Loads both splits and normalizes them with training-set statistics.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, eval) = match self.source {
            DataSource::Synthetic => {
                let spec = SynthSpec {
                    classes: self.classes,
                    channels: self.channels,
                    image_size: self.image_size,
                    snr: self.snr,
                    seed: self.data_seed,
                };
                (
                    synth_blobs(&spec, self.train_per_class, Split::Train)?,
                    synth_blobs(&spec, self.eval_per_class, Split::Eval)?,
                )
            }
            DataSource::Idx => (
                load_idx(
                    &self.path(&self.train_images, "train_images")?,
                    &self.path(&self.train_labels, "train_labels")?,
                    self.train_limit,
                    Split::Train,
                )?,
                load_idx(
                    &self.path(&self.eval_images, "eval_images")?,
                    &self.path(&self.eval_labels, "eval_labels")?,
                    self.eval_limit,
                    Split::Eval,
                )?,
            ),
            DataSource::Cifar10 => (
                load_cifar_binary(
                    &self.path(&self.train_images, "train_images")?,
                    CifarLayout::default(),
                    self.train_limit,
                    Split::Train,
                )?,
                load_cifar_binary(
                    &self.path(&self.eval_images, "eval_images")?,
                    CifarLayout::default(),
                    self.eval_limit,
                    Split::Eval,
                )?,
            ),
        };
        let (train, eval, _) = normalize_splits(&train, &eval);
        Ok((train, eval))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub penalty: PenaltyConfig,
    pub data: DataSection,
}

/// Command-line overrides applied on top of a config file or preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub algorithm: Option<Algorithm>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub bits: Option<u8>,
}

pub const PRESETS: [(&str, &str); 6] = [
    ("desk", include_str!("../../../presets/desk.conf")),
    (
        "desk-aggressive",
        include_str!("../../../presets/desk-aggressive.conf"),
    ),
    (
        "cifar10-table2",
        include_str!("../../../presets/cifar10-table2.conf"),
    ),
    (
        "cifar100-table3",
        include_str!("../../../presets/cifar100-table3.conf"),
    ),
    (
        "ctl1-table4",
        include_str!("../../../presets/ctl1-table4.conf"),
    ),
    (
        "imagenet-table5",
        include_str!("../../../presets/imagenet-table5.conf"),
    ),
];

impl RunConfig {
    /// Strict parse: every unrecognised key is reported.
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        let cfg: RunConfig =
            serde_ignored::deserialize(value, |path| unknown.push(path.to_string()))
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "unknown preset {name:?}; available: {}",
                names.join(", ")
            ))
        })?;
        Self::parse(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.algorithm {
            self.run.algorithm = a;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(e) = o.epochs {
            self.run.epochs = e;
        }
        if let Some(b) = o.bits {
            self.run.bits = b;
        }
    }

    pub fn schedule_variant(&self) -> ScheduleVariant {
        self.schedule
            .variant
            .unwrap_or(self.run.algorithm.default_schedule())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let s = &self.schedule;
        let reference = ScheduleConfig {
            variant: self.schedule_variant(),
            initial_lr: s.initial_lr,
            lr_factor: s.lr_factor,
            lr_milestones: s.lr_milestones.clone(),
            penalty_milestones: s.penalty_milestones.clone(),
            lambda_factors: s.lambda_factors.clone(),
            beta_factors: s.beta_factors.clone(),
        };
        let cfg = TrainConfig {
            algorithm: self.run.algorithm,
            epochs: self.run.epochs,
            batch_size: self.run.batch_size,
            seed: self.run.seed,
            bits: self.run.bits,
            projection: match self.run.alternating_rounds {
                0 => ProjectionMethod::Exact,
                rounds => ProjectionMethod::Alternating { rounds },
            },
            schedule: reference.scaled(s.reference_epochs, self.run.epochs)?,
            penalty: self.penalty,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn architecture(&self, train: &Dataset) -> Result<Architecture> {
        let (c, h, w) = train.image_shape();
        let arch = Architecture {
            in_channels: c,
            height: h,
            width: w,
            classes: train.classes(),
            conv1_channels: self.model.conv1_channels,
            conv2_channels: self.model.conv2_channels,
        };
        arch.validate()?;
        Ok(arch)
    }
}

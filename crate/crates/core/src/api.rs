//! Wire types shared by the HTTP service and its client.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::penalties::PenaltyConfig;
use crate::run::{default_run_dir, run_root, RunManifest};
use crate::schedule::{ScheduleConfig, ScheduleState};
use crate::tensor::Tensor;
use crate::trainer::Algorithm;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
}

impl From<&ApiOverrides> for Overrides {
    fn from(o: &ApiOverrides) -> Self {
        Overrides {
            algorithm: o.algorithm,
            seed: o.seed,
            epochs: o.epochs,
            bits: o.bits,
        }
    }
}

/// Start a training run from a preset, a config text, or both
/// (`config` wins over `preset`). Without either the desk preset is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Config file contents.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub overrides: ApiOverrides,
    /// Run directory; defaults to `<run root>/<label>-<algorithm>-s<seed>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunRequest {
    pub fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let (mut cfg, label) = match (&self.config, &self.preset) {
            (Some(text), _) => (RunConfig::parse(text)?, "custom".to_string()),
            (None, Some(name)) => (RunConfig::preset(name)?, name.clone()),
            (None, None) => (RunConfig::preset("desk")?, "desk".to_string()),
        };
        cfg.apply(&(&self.overrides).into());
        cfg.train_config()?;
        let dir = match &self.out {
            Some(out) => out.clone(),
            None => default_run_dir(&run_root(), &label, &cfg),
        };
        Ok((cfg, dir))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Completed,
    Collapsed,
    Failed,
}

impl RunState {
    pub fn is_finished(self) -> bool {
        self != RunState::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub id: u64,
    pub dir: PathBuf,
    pub state: RunState,
    pub epochs: usize,
    pub epochs_done: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    /// Bad configuration or arguments.
    Invalid,
    NotFound,
    Corrupt,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::Shape { .. }
            | Error::Argument(_)
            | Error::Config(_)
            | Error::UnknownKeys(_)
            | Error::NonFinite { .. }
            | Error::Json(_) => ErrorKind::Invalid,
            Error::MissingArtifact { .. } => ErrorKind::NotFound,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::NotFound
            }
            Error::Format { .. } | Error::Version { .. } | Error::Checksum { .. } => {
                ErrorKind::Corrupt
            }
            Error::State(_) | Error::Collapse(_) | Error::Io { .. } => ErrorKind::Internal,
        };
        ApiError {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRequest {
    pub run: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub run: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRequest {
    pub x: Tensor,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectRequest {
    pub w: Tensor,
    pub bits: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_scale: Option<f64>,
    /// Alternating rounds instead of the exact projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternating_rounds: Option<u32>,
}

/// Group Lasso over the output channels (axis 0) of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLassoRequest {
    pub w: Tensor,
    /// Prox threshold.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLassoResponse {
    pub value: f64,
    pub subgradient: Tensor,
    pub prox: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ctl1Request {
    pub w: Tensor,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ctl1Response {
    pub value: f64,
    pub gradient: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRequest {
    pub schedule: ScheduleConfig,
    pub penalty: PenaltyConfig,
    pub epochs: Vec<usize>,
}

pub type ScheduleResponse = Vec<ScheduleState>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub build: String,
}

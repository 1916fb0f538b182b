//! Run directories and the tools that read them.
//!
//! ```text
//! <run>/manifest      JSON RunManifest
//! <run>/metrics.csv   one row per completed epoch
//! <run>/channels.csv  surviving channels per layer at the last completed epoch
//! <run>/model.qckpt   final quantized checkpoint (completed runs only)
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::checkpoint::QuantizedCheckpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, parse_channels_csv, parse_metrics_csv, MetricsRecord, MetricsRow};
use crate::trainer::{CollapseEvent, Trainer};

pub const MANIFEST_FILE: &str = "manifest";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHANNELS_FILE: &str = "channels.csv";
pub const CHECKPOINT_FILE: &str = "model.qckpt";
pub const SPARSITY_SERIES_FILE: &str = "sparsity_vs_epoch.csv";
pub const CHANNELS_SERIES_FILE: &str = "channels_per_layer.csv";

/// Directory under which runs without an explicit output path are created.
pub const RUN_ROOT_ENV: &str = "QSPARSE_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<label>-<algorithm>-s<seed>`
pub fn default_run_dir(root: &Path, label: &str, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{label}-{}-s{}", cfg.run.algorithm, cfg.run.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Collapsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub channels: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Resolved configuration, overrides included.
    pub config: String,
    pub build: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapse: Option<CollapseEvent>,
    pub paths: RunPaths,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }
}

pub fn build_id() -> String {
    format!(
        "qsparse-core {}{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("QSPARSE_BUILD_ID")
            .map(|b| format!("+{b}"))
            .unwrap_or_default()
    )
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<MetricsRecord>,
}

/// Trains `cfg` and writes the run directory. A collapse is an outcome, not an error.
pub fn execute_run(
    cfg: &RunConfig,
    dir: &Path,
    on_epoch: impl FnMut(&MetricsRecord),
) -> Result<RunReport> {
    let started_at = now();
    let train_cfg = cfg.train_config()?;
    let (train, eval) = cfg.data.load()?;
    let arch = cfg.architecture(&train)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut trainer = Trainer::new(train_cfg, arch)?;
    let outcome = trainer.run(&train, &eval, on_epoch)?;

    let paths = RunPaths {
        metrics: dir.join(METRICS_FILE),
        channels: dir.join(CHANNELS_FILE),
        checkpoint: outcome
            .collapse
            .is_none()
            .then(|| dir.join(CHECKPOINT_FILE)),
    };
    write(&paths.metrics, metrics::metrics_csv(&outcome.records))?;
    let last_counts = outcome
        .records
        .last()
        .map(|r| r.per_layer_channel_counts.clone())
        .unwrap_or_default();
    write(&paths.channels, metrics::channels_csv(&last_counts))?;
    if let Some(path) = &paths.checkpoint {
        trainer.finalize()?.write(path)?;
    }

    let manifest = RunManifest {
        config: cfg.to_toml(),
        build: build_id(),
        seed: cfg.run.seed,
        started_at,
        finished_at: now(),
        outcome: if outcome.collapse.is_some() {
            Outcome::Collapsed
        } else {
            Outcome::Completed
        },
        collapse: outcome.collapse,
        paths,
    };
    write(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(RunReport {
        dir: dir.to_path_buf(),
        manifest,
        records: outcome.records,
    })
}

fn read_artifact(run: &Path, file: &str, what: &'static str) -> Result<String> {
    let path = run.join(file);
    match std::fs::read_to_string(&path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            run: run.to_path_buf(),
            what,
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn read_metrics(run: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics_csv(&read_artifact(run, METRICS_FILE, "metrics.csv")?)
}

pub fn read_manifest(run: &Path) -> Result<RunManifest> {
    RunManifest::from_json(&read_artifact(run, MANIFEST_FILE, "manifest")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: PathBuf,
    pub model: String,
    pub pruning: String,
    pub channel_sparsity: f64,
    pub weight_sparsity: f64,
    pub accuracy: f64,
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["Model", "Pruning", "Ch. sp", "Wt. sp", "Accuracy"];
pub const SUMMARY_CSV_HEADER: &str = "model,pruning,channel_sparsity,weight_sparsity,accuracy,run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub text: String,
    pub csv: String,
}

/// Final-epoch summary of each run, as an aligned table and as CSV.
pub fn compare(runs: &[PathBuf]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::Argument(
            "compare needs at least one run directory".into(),
        ));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let manifest = read_manifest(run)?;
        let cfg = manifest.run_config()?;
        let last = *read_metrics(run)?
            .last()
            .ok_or_else(|| Error::MissingArtifact {
                run: run.clone(),
                what: "metrics rows",
            })?;
        if manifest.outcome == Outcome::Collapsed {
            tracing::warn!(run = %run.display(), "comparing a collapsed run; its last completed epoch is used");
        }
        rows.push(SummaryRow {
            run: run.clone(),
            model: format!(
                "convnet-{}-{}",
                cfg.model.conv1_channels, cfg.model.conv2_channels
            ),
            pruning: cfg.run.algorithm.pruning_label().to_string(),
            channel_sparsity: last.channel_sparsity,
            weight_sparsity: last.weight_sparsity,
            accuracy: last.eval_accuracy,
        });
    }

    let pct = |v: f64| format!("{:.2}%", v * 100.0);
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.pruning.clone(),
                pct(r.channel_sparsity),
                pct(r.weight_sparsity),
                pct(r.accuracy),
            ]
        })
        .collect();
    let mut widths = SUMMARY_COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cols: [&str; 5]| -> String {
        cols.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut text = line(SUMMARY_COLUMNS) + "\n";
    text += &widths
        .iter()
        .map(|&w| "-".repeat(w))
        .collect::<Vec<_>>()
        .join("-|-");
    text.push('\n');
    for row in &cells {
        text += &line([&row[0], &row[1], &row[2], &row[3], &row[4]]);
        text.push('\n');
    }

    let mut csv = format!("{SUMMARY_CSV_HEADER}\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{}",
            r.model,
            r.pruning,
            r.channel_sparsity,
            r.weight_sparsity,
            r.accuracy,
            r.run.display()
        )
        .unwrap();
    }
    Ok(Summary { rows, text, csv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotFiles {
    pub sparsity_vs_epoch: PathBuf,
    pub channels_per_layer: PathBuf,
}

/// Writes the figure series for `run` into `out` (defaults to the run directory).
pub fn plotdata(run: &Path, out: Option<&Path>) -> Result<PlotFiles> {
    let rows = read_metrics(run)?;
    if rows.is_empty() {
        return Err(Error::MissingArtifact {
            run: run.to_path_buf(),
            what: "metrics rows",
        });
    }
    let channels = parse_channels_csv(&read_artifact(run, CHANNELS_FILE, "channels.csv")?)?;
    let out = out.unwrap_or(run);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut series = format!("{}\n", metrics::SPARSITY_SERIES_HEADER);
    for r in &rows {
        writeln!(
            series,
            "{},{:.6},{:.6}",
            r.epoch, r.weight_sparsity, r.channel_sparsity
        )
        .unwrap();
    }
    let files = PlotFiles {
        sparsity_vs_epoch: out.join(SPARSITY_SERIES_FILE),
        channels_per_layer: out.join(CHANNELS_SERIES_FILE),
    };
    write(&files.sparsity_vs_epoch, series)?;
    write(&files.channels_per_layer, metrics::channels_csv(&channels))?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub accuracy: f64,
    pub weight_sparsity: f64,
    pub channel_sparsity: f64,
    pub samples: usize,
}

/// Re-evaluates a run's checkpoint on the eval split named by its manifest.
pub fn eval_run(run: &Path) -> Result<EvalReport> {
    let manifest = read_manifest(run)?;
    let cfg = manifest.run_config()?;
    let path = run.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            run: run.to_path_buf(),
            what: "model.qckpt",
        });
    }
    let ck = QuantizedCheckpoint::read(&path)?;
    let (_, eval) = cfg.data.load()?;
    Ok(EvalReport {
        accuracy: ck.eval_accuracy(&eval)?,
        weight_sparsity: metrics::weight_sparsity(&ck.weights),
        channel_sparsity: metrics::channel_sparsity(&ck.weights),
        samples: eval.len(),
        checkpoint: path,
    })
}

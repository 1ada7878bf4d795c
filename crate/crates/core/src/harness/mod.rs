//! Orchestration: single runs, sweeps, and the reports built from their
//! output directories.
//!
//! A run directory holds `config.json`, `metrics.jsonl`, a checkpoint
//! (`manifest.json` + `tensors.bin`) and `summary.json`. A sweep directory
//! holds one run directory per cell plus `summary.csv`.

mod checkpoint;
mod report;
mod run;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DEFAULT_TEST_FRACTION};
use crate::head::{HeadError, HeadStrategy};
use crate::metrics::MetricsError;
use crate::model::{ModelConfig, ModelError, SizeTag};
use crate::nn::NnError;
use crate::optim::{OptimConfig, OptimError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry};
pub use report::{aggregate, analyze, bratio_report, curves, read_metrics, AnalyzeReport, BRatioRow, GroupKey, GroupStats};
pub use run::{run_train, Evaluation, RunRecord, RunSummary, StepOutcome, Trainer};
pub use sweep::{read_summary_csv, run_sweep, write_summary_csv, SweepGrid, SweepReport, SweepRow};

/// Environment variable that replaces `out_dir` of a loaded config.
pub const OUT_ENV: &str = "LOGITLAB_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Graph(#[from] NnError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> HarnessError + '_ {
    move |source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(json_err(path))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub head: HeadStrategy,
    /// Corpus file; the bundled fixture text when absent.
    pub data: Option<PathBuf>,
    pub test_fraction: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Number of test-set logit vectors pooled per evaluation.
    pub metric_sample_size: usize,
    pub out_dir: PathBuf,
    pub run_id: String,
    /// When false, `step_ms` is written as 0 so `metrics.jsonl` is
    /// reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            head: HeadStrategy::default(),
            data: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            batch_size: 4,
            eval_every: 100,
            metric_sample_size: 10_000,
            out_dir: PathBuf::from("runs"),
            run_id: "run".into(),
            record_timing: true,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config and applies the `LOGITLAB_OUT` override.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut c: RunConfig = read_json(path)?;
        c.override_out_dir(std::env::var_os(OUT_ENV).map(PathBuf::from));
        Ok(c)
    }

    pub fn override_out_dir(&mut self, dir: Option<PathBuf>) {
        if let Some(d) = dir {
            self.out_dir = d;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        self.optim.validate()?;
        self.head.validate()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.eval_every == 0 || !self.optim.total_steps.is_multiple_of(self.eval_every) {
            return bad(format!(
                "eval_every {} must divide total_steps {}",
                self.eval_every, self.optim.total_steps
            ));
        }
        if self.batch_size == 0 || self.metric_sample_size == 0 {
            return bad("batch_size and metric_sample_size must be positive".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id {:?} is not a plain directory name", self.run_id));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    /// Preset tag matching the model dimensions, or `custom`.
    pub fn size_tag(&self) -> String {
        SizeTag::ALL
            .into_iter()
            .find(|t| {
                let p = ModelConfig::sized(*t);
                (p.n_layers, p.hidden_dim, p.n_heads, p.ffn_dim)
                    == (
                        self.model.n_layers,
                        self.model.hidden_dim,
                        self.model.n_heads,
                        self.model.ffn_dim,
                    )
            })
            .map_or_else(|| "custom".to_string(), |t| t.to_string())
    }

    /// Number of test windows needed for `metric_sample_size` vectors.
    pub fn eval_windows(&self) -> usize {
        self.metric_sample_size.div_ceil(self.model.seq_len)
    }
}

//! Grid sweeps over strategy, learning rate, lambda, tying and size.
//!
//! Cells are independent runs in their own directories. A cell whose
//! summary exists and whose files still match the recorded digests is not
//! trained again, so an interrupted sweep can simply be restarted.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::checkpoint::TENSORS_FILE;
use super::run::{run_train, RunSummary, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
use super::{io_err, read_json, HarnessError, RunConfig};
use crate::data::{sha256_hex, Corpus};
use crate::head::{HeadKind, HeadStrategy};
use crate::model::{ModelConfig, SizeTag};

pub const SUMMARY_CSV: &str = "summary.csv";

/// Axes of a sweep. Lambdas only expand strategies that use them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub strategies: Vec<HeadKind>,
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub tying: Vec<bool>,
    pub sizes: Vec<SizeTag>,
    /// Settings shared by every cell; `out_dir` is the sweep directory.
    pub base: RunConfig,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            strategies: HeadKind::ALL.to_vec(),
            etas: vec![3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1],
            lambdas: vec![crate::head::DEFAULT_LAMBDA],
            tying: vec![false],
            sizes: vec![SizeTag::Small],
            base: RunConfig::default(),
        }
    }
}

impl SweepGrid {
    /// Lambda grid for regularization-strength studies.
    pub const LAMBDA_AXIS: [f64; 4] = [1e-7, 1e-4, 1e-1, 1e2];

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut g: SweepGrid = read_json(path)?;
        g.base
            .override_out_dir(std::env::var_os(super::OUT_ENV).map(PathBuf::from));
        Ok(g)
    }

    /// Run configs of every cell, in a fixed order.
    pub fn cells(&self) -> Result<Vec<RunConfig>, HarnessError> {
        if self.strategies.is_empty()
            || self.etas.is_empty()
            || self.tying.is_empty()
            || self.sizes.is_empty()
        {
            return Err(HarnessError::Config("sweep grid has an empty axis".into()));
        }
        let mut cells = Vec::new();
        for &size in &self.sizes {
            for &tying in &self.tying {
                for &kind in &self.strategies {
                    let lambdas: Vec<Option<f64>> = if kind.uses_lambda() {
                        if self.lambdas.is_empty() {
                            return Err(HarnessError::Config(format!("{kind} needs at least one lambda")));
                        }
                        self.lambdas.iter().map(|&l| Some(l)).collect()
                    } else {
                        vec![None]
                    };
                    for lambda in lambdas {
                        for &eta in &self.etas {
                            let mut c = self.base.clone();
                            c.model = ModelConfig {
                                weight_tying: tying,
                                seed: self.base.model.seed,
                                seq_len: self.base.model.seq_len,
                                vocab_size: self.base.model.vocab_size,
                                ..ModelConfig::sized(size)
                            };
                            c.optim.peak_lr = eta;
                            c.head = HeadStrategy {
                                kind,
                                lambda: lambda.unwrap_or(self.base.head.lambda),
                                cap: self.base.head.cap,
                            };
                            c.run_id = cell_id(kind, size, eta, lambda, tying);
                            cells.push(c);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

fn cell_id(kind: HeadKind, size: SizeTag, eta: f64, lambda: Option<f64>, tying: bool) -> String {
    let lam = lambda.map_or_else(String::new, |l| format!("_lam{l:e}"));
    format!("{kind}_{size}_eta{eta:e}{lam}_tie{}", u8::from(tying))
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strategy: String,
    pub size: String,
    pub eta: f64,
    /// `None` for strategies without a lambda.
    pub lambda: Option<f64>,
    pub tying: bool,
    /// NaN when diverged or missing.
    pub final_loss: f64,
    pub diverged: bool,
    pub mean_step_ms: f64,
    pub init_loss: f64,
    pub median_step_ms: f64,
    pub run_id: String,
    /// `ok`, `resumed`, or `failed: <reason>`.
    pub status: String,
}

impl SweepRow {
    pub fn is_complete(&self) -> bool {
        self.status == "ok" || self.status == "resumed"
    }

    fn from_summary(s: &RunSummary, lambda: Option<f64>, status: &str) -> Self {
        Self {
            strategy: s.strategy.clone(),
            size: s.size.clone(),
            eta: s.eta,
            lambda,
            tying: s.tying,
            final_loss: s.final_loss,
            diverged: s.diverged,
            mean_step_ms: s.mean_step_ms,
            init_loss: s.init_loss,
            median_step_ms: s.median_step_ms,
            run_id: s.run_id.clone(),
            status: status.into(),
        }
    }

    fn failed(c: &RunConfig, reason: String) -> Self {
        Self {
            strategy: c.head.kind.to_string(),
            size: c.size_tag(),
            eta: c.optim.peak_lr,
            lambda: c.head.kind.uses_lambda().then_some(c.head.lambda),
            tying: c.model.weight_tying,
            final_loss: f64::NAN,
            diverged: false,
            mean_step_ms: f64::NAN,
            init_loss: f64::NAN,
            median_step_ms: f64::NAN,
            run_id: c.run_id.clone(),
            status: format!("failed: {}", reason.replace([',', '\n'], ";")),
        }
    }
}

pub const CSV_HEADER: &str =
    "strategy,size,eta,lambda,tying,final_loss,diverged,mean_step_ms,init_loss,median_step_ms,run_id,status";

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.size,
            r.eta,
            r.lambda.map_or_else(String::new, |l| l.to_string()),
            r.tying,
            fmt_f(r.final_loss),
            r.diverged,
            fmt_f(r.mean_step_ms),
            fmt_f(r.init_loss),
            fmt_f(r.median_step_ms),
            r.run_id,
            r.status
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, what: &str| HarnessError::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {what}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let num = |s: &str, line: usize, col: &str| -> Result<f64, HarnessError> {
        if s.is_empty() {
            Ok(f64::NAN)
        } else {
            s.parse().map_err(|_| bad(line, col))
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(bad(n, "expected 12 columns"));
        }
        let eta = num(f[2], n, "eta")?;
        if !eta.is_finite() {
            return Err(bad(n, "eta"));
        }
        rows.push(SweepRow {
            strategy: f[0].into(),
            size: f[1].into(),
            eta,
            lambda: if f[3].is_empty() {
                None
            } else {
                Some(num(f[3], n, "lambda")?)
            },
            tying: f[4].parse().map_err(|_| bad(n, "tying"))?,
            final_loss: num(f[5], n, "final_loss")?,
            diverged: f[6].parse().map_err(|_| bad(n, "diverged"))?,
            mean_step_ms: num(f[7], n, "mean_step_ms")?,
            init_loss: num(f[8], n, "init_loss")?,
            median_step_ms: num(f[9], n, "median_step_ms")?,
            run_id: f[10].into(),
            status: f[11].into(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Summary of a finished cell whose files still match their digests and
/// whose stored config equals `config`.
fn completed_cell(config: &RunConfig) -> Option<RunSummary> {
    let dir = config.run_dir();
    let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE)).ok()?;
    let stored: RunConfig = read_json(&dir.join(CONFIG_FILE)).ok()?;
    let mut want = config.clone();
    want.out_dir = stored.out_dir.clone();
    if stored != want {
        return None;
    }
    let digest = |name: &str| fs::read(dir.join(name)).ok().map(|b| sha256_hex(&b));
    (digest(METRICS_FILE)? == summary.metrics_sha256 && digest(TENSORS_FILE)? == summary.tensors_sha256)
        .then_some(summary)
}

/// Runs every cell (up to `jobs` at once), writes `summary.csv` into the
/// sweep directory and returns its rows. Failing cells are recorded and
/// do not stop the sweep.
pub fn run_sweep(grid: &SweepGrid, corpus: &Corpus, jobs: usize) -> Result<SweepReport, HarnessError> {
    let cells = grid.cells()?;
    let dir = grid.base.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(c) = cells.get(i) else { break };
        let lambda = c.head.kind.uses_lambda().then_some(c.head.lambda);
        let row = if let Some(s) = completed_cell(c) {
            log::info!("cell {} already complete, skipping", c.run_id);
            SweepRow::from_summary(&s, lambda, "resumed")
        } else {
            match run_train(c, corpus) {
                Ok(rec) => SweepRow::from_summary(&rec.summary, lambda, "ok"),
                Err(e) => {
                    log::error!("cell {} failed: {e}", c.run_id);
                    SweepRow::failed(c, e.to_string())
                }
            }
        };
        rows.lock().expect("no worker panicked")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len()) {
            s.spawn(worker);
        }
    });
    let rows: Vec<SweepRow> = rows
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    write_summary_csv(&dir.join(SUMMARY_CSV), &rows)?;
    Ok(SweepReport { dir, rows })
}

//! Tables and curve data derived from finished sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, MANIFEST_FILE};
use super::run::{median, RunSummary, METRICS_FILE, SUMMARY_FILE};
use super::sweep::{read_summary_csv, SweepRow, SUMMARY_CSV};
use super::{io_err, read_json, HarnessError};
use crate::head::{zloss_1d_curve, HeadKind};
use crate::metrics::{self, lrs, BRatioRecord, LrsInput, MetricSample};
use crate::nn::log_sum_exp;

pub const LRS_CSV: &str = "lrs.csv";
pub const OPTIMAL_CSV: &str = "optimal_loss.csv";
pub const OVERHEAD_CSV: &str = "overhead.csv";
pub const MISSING_TXT: &str = "missing.txt";
pub const BRATIO_CSV: &str = "bratio.csv";
pub const CURVES_DIR: &str = "curves";

/// Cells sharing everything but the learning rate.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub strategy: String,
    pub size: String,
    pub tying: bool,
    /// Empty for strategies without a lambda.
    pub lambda: String,
}

impl GroupKey {
    fn of(r: &SweepRow) -> Self {
        Self {
            strategy: r.strategy.clone(),
            size: r.size.clone(),
            tying: r.tying,
            lambda: r.lambda.map_or_else(String::new, |l| l.to_string()),
        }
    }

    fn csv(&self) -> String {
        format!("{},{},{},{}", self.strategy, self.size, self.tying, self.lambda)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub lrs: f64,
    pub init_loss: f64,
    pub optimal_loss: f64,
    pub best_eta: f64,
    pub median_step_ms: f64,
    /// Relative to the baseline group of the same size and tying, in percent.
    pub overhead_pct: f64,
    pub n_etas: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeReport {
    pub groups: BTreeMap<GroupKey, GroupStats>,
    /// Run ids of cells without usable results.
    pub missing: Vec<String>,
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Aggregates the rows of a sweep; LRS is recomputed from the raw losses.
pub fn aggregate(rows: &[SweepRow]) -> Result<AnalyzeReport, HarnessError> {
    let mut by_group: BTreeMap<GroupKey, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_group.entry(GroupKey::of(r)).or_default().push(r);
    }
    let mut groups = BTreeMap::new();
    let mut missing = Vec::new();
    for (key, members) in &by_group {
        let done: Vec<&&SweepRow> = members.iter().filter(|r| r.is_complete()).collect();
        missing.extend(members.iter().filter(|r| !r.is_complete()).map(|r| r.run_id.clone()));
        let inits: Vec<f64> = done.iter().map(|r| r.init_loss).filter(|l| l.is_finite()).collect();
        let init_loss = median(&inits);
        let lrs_value = if done.is_empty() || !init_loss.is_finite() {
            f64::NAN
        } else {
            lrs(&LrsInput {
                eta_grid: done.iter().map(|r| r.eta).collect(),
                final_losses: done.iter().map(|r| r.final_loss).collect(),
                init_loss,
            })?
        };
        let best = done
            .iter()
            .filter(|r| r.final_loss.is_finite())
            .min_by(|a, b| a.final_loss.total_cmp(&b.final_loss));
        let times: Vec<f64> = done.iter().map(|r| r.median_step_ms).filter(|t| t.is_finite()).collect();
        groups.insert(
            key.clone(),
            GroupStats {
                lrs: lrs_value,
                init_loss,
                optimal_loss: best.map_or(f64::NAN, |r| r.final_loss),
                best_eta: best.map_or(f64::NAN, |r| r.eta),
                median_step_ms: median(&times),
                overhead_pct: f64::NAN,
                n_etas: done.len(),
                missing: members.len() - done.len(),
            },
        );
    }
    let baselines: BTreeMap<(String, bool), f64> = groups
        .iter()
        .filter(|(k, _)| k.strategy == HeadKind::Baseline.as_str())
        .map(|(k, s)| ((k.size.clone(), k.tying), s.median_step_ms))
        .collect();
    for (k, s) in groups.iter_mut() {
        if let Some(&base) = baselines.get(&(k.size.clone(), k.tying)) {
            s.overhead_pct = if k.strategy == HeadKind::Baseline.as_str() {
                0.0
            } else {
                (s.median_step_ms / base - 1.0) * 100.0
            };
        }
    }
    Ok(AnalyzeReport { groups, missing })
}

/// Writes `lrs.csv`, `optimal_loss.csv` and `overhead.csv` (plus
/// `missing.txt` when cells lack results) for the sweep in `dir`.
pub fn analyze(dir: &Path) -> Result<AnalyzeReport, HarnessError> {
    let rows = read_summary_csv(&dir.join(SUMMARY_CSV))?;
    let report = aggregate(&rows)?;
    let key_cols = "strategy,size,tying,lambda";
    let mut lrs_csv = format!("{key_cols},lrs,init_loss,n_etas,missing\n");
    let mut opt_csv = format!("{key_cols},optimal_loss,best_eta\n");
    let mut ovh_csv = format!("{key_cols},median_step_ms,overhead_pct\n");
    for (k, s) in &report.groups {
        let key = k.csv();
        lrs_csv.push_str(&format!(
            "{key},{},{},{},{}\n",
            fmt_f(s.lrs),
            fmt_f(s.init_loss),
            s.n_etas,
            s.missing
        ));
        opt_csv.push_str(&format!("{key},{},{}\n", fmt_f(s.optimal_loss), fmt_f(s.best_eta)));
        ovh_csv.push_str(&format!("{key},{},{}\n", fmt_f(s.median_step_ms), fmt_f(s.overhead_pct)));
    }
    for (name, body) in [(LRS_CSV, lrs_csv), (OPTIMAL_CSV, opt_csv), (OVERHEAD_CSV, ovh_csv)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    let p = dir.join(MISSING_TXT);
    if report.missing.is_empty() {
        if p.exists() {
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    } else {
        fs::write(&p, report.missing.join("\n") + "\n").map_err(io_err(&p))?;
    }
    Ok(report)
}

/// Run directories (those with a summary or checkpoint) below `dir`, sorted.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_dir() && (p.join(SUMMARY_FILE).exists() || p.join(MANIFEST_FILE).exists()) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BRatioRow {
    pub run_id: String,
    pub strategy: String,
    pub size: String,
    pub eta: f64,
    pub tying: bool,
    /// `None` when the checkpoint could not be read or is not finite.
    pub record: Option<BRatioRecord>,
    pub status: String,
}

fn bratio_row(dir: &Path) -> BRatioRow {
    let run_id = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let summary: Option<RunSummary> = read_json(&dir.join(SUMMARY_FILE)).ok();
    let mut row = BRatioRow {
        run_id,
        strategy: summary.as_ref().map_or_else(String::new, |s| s.strategy.clone()),
        size: summary.as_ref().map_or_else(String::new, |s| s.size.clone()),
        eta: summary.as_ref().map_or(f64::NAN, |s| s.eta),
        tying: summary.as_ref().is_some_and(|s| s.tying),
        record: None,
        status: "ok".into(),
    };
    match load_checkpoint::<f64>(dir) {
        Ok((_, params)) => match params.output_table() {
            Ok(e) => row.record = Some(metrics::b_ratio(&e)),
            Err(_) => row.status = "non_finite".into(),
        },
        Err(e) => {
            log::warn!("unreadable checkpoint in {}: {e}", dir.display());
            row.status = "unreadable".into();
        }
    }
    row
}

/// Writes `bratio.csv` with one row per run directory under `dir`.
pub fn bratio_report(dir: &Path) -> Result<Vec<BRatioRow>, HarnessError> {
    let rows: Vec<BRatioRow> = run_dirs(dir)?.iter().map(|d| bratio_row(d)).collect();
    let mut csv = String::from("run_id,strategy,size,eta,tying,mu_norm_sq,b_minus,b_plus,b_ratio,degenerate,status\n");
    for r in &rows {
        let rec = r.record.map_or_else(
            || ",,,,".to_string(),
            |b| {
                format!(
                    "{},{},{},{},{}",
                    b.mu_norm_sq, b.b_minus, b.b_plus, b.b_ratio, b.degenerate
                )
            },
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{rec},{}\n",
            r.run_id,
            r.strategy,
            r.size,
            fmt_f(r.eta),
            r.tying,
            r.status
        ));
    }
    let p = dir.join(BRATIO_CSV);
    fs::write(&p, csv).map_err(io_err(&p))?;
    Ok(rows)
}

/// Reads every row of a `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricSample>, HarnessError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(super::json_err(path))?);
        }
    }
    Ok(out)
}

/// Grid for the z-loss illustrations.
fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Writes raw CSVs for plotting into `dir/curves`. Sweep-derived files are
/// produced when `dir` holds a sweep; the z-loss curves always are.
pub fn curves(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let out_dir = dir.join(CURVES_DIR);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<(), HarnessError> {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };

    let mut z1 = String::from("s,l,lz\n");
    for s in [0.0, 0.1, 1.0, 10.0, 100.0] {
        for (l, lz) in zloss_1d_curve(s, &grid(-10.0, 10.0, 201), 1.0)? {
            z1.push_str(&format!("{s},{l},{lz}\n"));
        }
    }
    emit("zloss_1d.csv", z1)?;
    let mut z2 = String::from("l1,l2,lz\n");
    let axis = grid(-5.0, 5.0, 101);
    for &a in &axis {
        for &b in &axis {
            let lz = log_sum_exp(&[a, b]).powi(2);
            z2.push_str(&format!("{a},{b},{lz}\n"));
        }
    }
    emit("zloss_2d.csv", z2)?;

    let summary = dir.join(SUMMARY_CSV);
    if !summary.exists() {
        return Ok(written);
    }
    let rows = read_summary_csv(&summary)?;
    let mut loss = String::from("strategy,size,tying,lambda,eta,final_loss,diverged,status\n");
    for r in &rows {
        loss.push_str(&format!(
            "{},{},{},{},{}\n",
            GroupKey::of(r).csv(),
            r.eta,
            fmt_f(r.final_loss),
            r.diverged,
            r.status
        ));
    }
    emit("loss_vs_lr.csv", loss)?;

    let report = aggregate(&rows)?;
    let mut lrs_size = String::from("strategy,size,tying,lambda,lrs\n");
    for (k, s) in &report.groups {
        lrs_size.push_str(&format!("{},{}\n", k.csv(), fmt_f(s.lrs)));
    }
    emit("lrs_vs_size.csv", lrs_size)?;

    let mut diag = String::from(
        "run_id,strategy,size,tying,lambda,eta,step,test_loss,mu_norm,logit_mean,logit_std,logit_max_abs,logit_max_abs_raw,b_ratio,diverged\n",
    );
    for r in rows.iter().filter(|r| r.is_complete()) {
        let path = dir.join(&r.run_id).join(METRICS_FILE);
        for s in read_metrics(&path)? {
            diag.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.run_id,
                GroupKey::of(r).csv(),
                r.eta,
                s.step,
                fmt_f(s.test_loss),
                fmt_f(s.mu_norm),
                fmt_f(s.logit_mean),
                fmt_f(s.logit_std),
                fmt_f(s.logit_max_abs),
                fmt_f(s.logit_max_abs_raw),
                fmt_f(s.b_ratio),
                s.diverged
            ));
        }
    }
    emit("diagnostics.csv", diag)?;

    let brows = bratio_report(dir)?;
    let mut b = String::from("run_id,strategy,size,eta,tying,b_ratio,status\n");
    for r in &brows {
        b.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            r.strategy,
            r.size,
            fmt_f(r.eta),
            r.tying,
            r.record.map_or_else(String::new, |x| fmt_f(x.b_ratio)),
            r.status
        ));
    }
    emit("bratio.csv", b)?;
    Ok(written)
}

//! End-to-end behavior of runs, sweeps and the reports built from them,
//! on tiny models and the bundled fixture text.

use std::fs;
use std::path::Path;

use logitlab::data::Corpus;
use logitlab::harness::{
    analyze, bratio_report, curves, load_checkpoint, read_metrics, read_summary_csv, run_sweep, run_train,
    save_checkpoint, write_summary_csv, GroupKey, HarnessError, RunConfig, SweepGrid, SweepRow, OUT_ENV,
};
use logitlab::head::{HeadKind, HeadStrategy};
use logitlab::model::{ModelConfig, ModelParams, SizeTag};
use tempfile::tempdir;

fn tiny(out: &Path, kind: HeadKind, run_id: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig {
        seq_len: 32,
        ..ModelConfig::sized(SizeTag::Tiny)
    };
    c.head = HeadStrategy::new(kind);
    c.optim.total_steps = 10;
    c.optim.warmup_steps = 2;
    c.optim.peak_lr = 3e-3;
    c.batch_size = 2;
    c.eval_every = 5;
    c.metric_sample_size = 64;
    c.out_dir = out.to_path_buf();
    c.run_id = run_id.into();
    c.record_timing = false;
    c
}

#[test]
fn repeated_runs_are_byte_identical() {
    let corpus = Corpus::fixture();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let ra = run_train(&tiny(a.path(), HeadKind::Baseline, "r"), &corpus).unwrap();
    let rb = run_train(&tiny(b.path(), HeadKind::Baseline, "r"), &corpus).unwrap();
    for name in ["metrics.jsonl", "tensors.bin", "manifest.json"] {
        let fa = fs::read(a.path().join("r").join(name)).unwrap();
        let fb = fs::read(b.path().join("r").join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs");
    }
    assert_eq!(ra.summary.metrics_sha256, rb.summary.metrics_sha256);
    let steps: Vec<usize> = ra.samples.iter().map(|s| s.step).collect();
    assert_eq!(steps, [0, 5, 10]);
    assert!(ra.samples.iter().all(|s| s.step_ms == 0.0));
    assert!(ra.summary.final_loss < ra.summary.init_loss);
    assert_eq!(ra.summary.final_loss, ra.samples[2].test_loss);
}

#[test]
fn mu_center_run_keeps_mean_embedding_at_zero() {
    let corpus = Corpus::fixture();
    let dir = tempdir().unwrap();
    for (kind, id) in [(HeadKind::MuCenter, "centered"), (HeadKind::Baseline, "plain")] {
        run_train(&tiny(dir.path(), kind, id), &corpus).unwrap();
    }
    let samples = read_metrics(&dir.path().join("centered/metrics.jsonl")).unwrap();
    assert!(samples.iter().all(|s| s.mu_norm <= 1e-5), "{samples:?}");
    let plain = read_metrics(&dir.path().join("plain/metrics.jsonl")).unwrap();
    assert!(plain.iter().all(|s| s.mu_norm > 1e-3));

    let rows = bratio_report(dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    let centered = rows.iter().find(|r| r.run_id == "centered").unwrap();
    assert_eq!(centered.strategy, "mu_center");
    // f32 storage leaves a residual mean of order 1e-8, so the ratio is
    // 1 up to rounding rather than flagged degenerate.
    let rec = centered.record.unwrap();
    assert!((rec.b_ratio - 1.0).abs() <= 1e-6, "{rec:?}");
    assert!(fs::read_to_string(dir.path().join("bratio.csv")).unwrap().lines().count() == 3);
}

#[test]
fn bratio_report_on_constructed_checkpoint() {
    let dir = tempdir().unwrap();
    let config = ModelConfig {
        vocab_size: 3,
        hidden_dim: 2,
        n_layers: 1,
        n_heads: 1,
        ffn_dim: 8,
        seq_len: 4,
        weight_tying: false,
        seed: 0,
    };
    let mut params = ModelParams::<f64>::init(&config).unwrap();
    // Rows realize B- = 7.8, B+ = 4.7 and ||mu||^2 = 4.9.
    let mu = 4.9f64.sqrt();
    let out = params.output_tensor_mut().values_mut();
    out.copy_from_slice(&[-2.9 / mu, 0.0, 9.6 / mu, 0.0, 8.0 / mu, 0.0]);
    let run = dir.path().join("fig");
    save_checkpoint(&run, &params, 0).unwrap();
    let rows = bratio_report(dir.path()).unwrap();
    let rec = rows[0].record.unwrap();
    assert!((rec.b_ratio - 0.8125).abs() <= 1e-6, "{rec:?}");
    assert!((rec.b_minus - 7.8).abs() <= 1e-5 && (rec.b_plus - 4.7).abs() <= 1e-5);

    fs::create_dir(dir.path().join("broken")).unwrap();
    fs::write(dir.path().join("broken/manifest.json"), "{").unwrap();
    let rows = bratio_report(dir.path()).unwrap();
    assert_eq!(rows.iter().find(|r| r.run_id == "broken").unwrap().status, "unreadable");
}

fn row(strategy: &str, eta: f64, loss: f64, ms: f64, status: &str) -> SweepRow {
    SweepRow {
        strategy: strategy.into(),
        size: "small".into(),
        eta,
        lambda: None,
        tying: false,
        final_loss: loss,
        diverged: !loss.is_finite(),
        mean_step_ms: ms,
        init_loss: 5.0,
        median_step_ms: ms,
        run_id: format!("{strategy}_{eta}"),
        status: status.into(),
    }
}

#[test]
fn analyze_computes_lrs_overhead_and_missing_cells() {
    let dir = tempdir().unwrap();
    let rows = vec![
        row("baseline", 1e-3, 3.0, 100.0, "ok"),
        row("baseline", 1e-2, 3.2, 100.0, "ok"),
        row("baseline", 1e-1, f64::NAN, 100.0, "ok"),
        row("mu_center", 1e-3, 3.1, 102.0, "ok"),
        row("mu_center", 1e-2, 3.1, 102.0, "resumed"),
        row("mu_center", 1e-1, 3.1, 102.0, "ok"),
        row("mu_loss", 1e-3, f64::NAN, f64::NAN, "failed: out of memory"),
    ];
    let path = dir.path().join("summary.csv");
    write_summary_csv(&path, &rows).unwrap();
    let back = read_summary_csv(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    assert!(back[2].final_loss.is_nan() && back[2].diverged);

    let report = analyze(dir.path()).unwrap();
    let key = |s: &str| GroupKey {
        strategy: s.into(),
        size: "small".into(),
        tying: false,
        lambda: String::new(),
    };
    let base = &report.groups[&key("baseline")];
    assert!((base.lrs - 2.2 / 3.0).abs() <= 1e-12);
    assert_eq!(base.overhead_pct, 0.0);
    assert_eq!(base.best_eta, 1e-3);
    let center = &report.groups[&key("mu_center")];
    assert_eq!(center.lrs, 0.0);
    assert!((center.overhead_pct - 2.0).abs() <= 1e-9);
    assert_eq!(report.missing, ["mu_loss_0.001"]);
    assert_eq!(fs::read_to_string(dir.path().join("missing.txt")).unwrap(), "mu_loss_0.001\n");
    for name in ["lrs.csv", "optimal_loss.csv", "overhead.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn sweep_matches_single_run_and_resumes() {
    let corpus = Corpus::fixture();
    let sweep_dir = tempdir().unwrap();
    let base = tiny(sweep_dir.path(), HeadKind::Baseline, "unused");
    let grid = SweepGrid {
        strategies: vec![HeadKind::Baseline, HeadKind::ZLoss],
        etas: vec![3e-3],
        lambdas: vec![1e-4],
        tying: vec![false],
        sizes: vec![SizeTag::Tiny],
        base: base.clone(),
    };
    let first = run_sweep(&grid, &corpus, 2).unwrap();
    assert_eq!(first.rows.len(), 2);
    assert!(first.rows.iter().all(|r| r.status == "ok"), "{:?}", first.rows);
    let cell = &first.rows[0];
    assert_eq!(cell.run_id, "baseline_tiny_eta3e-3_tie0");
    assert_eq!(first.rows[1].lambda, Some(1e-4));

    let single_dir = tempdir().unwrap();
    let mut single = grid.cells().unwrap().remove(0);
    single.out_dir = single_dir.path().to_path_buf();
    let rec = run_train(&single, &corpus).unwrap();
    assert_eq!(rec.summary.final_loss, cell.final_loss);
    assert_eq!(
        fs::read(single.run_dir().join("metrics.jsonl")).unwrap(),
        fs::read(sweep_dir.path().join(&cell.run_id).join("metrics.jsonl")).unwrap()
    );

    let again = run_sweep(&grid, &corpus, 1).unwrap();
    assert!(again.rows.iter().all(|r| r.status == "resumed"));
    assert_eq!(again.rows[0].final_loss, cell.final_loss);

    // A tampered log no longer matches its digest, so the cell reruns.
    let metrics = sweep_dir.path().join(&cell.run_id).join("metrics.jsonl");
    fs::write(&metrics, "{}\n").unwrap();
    let third = run_sweep(&grid, &corpus, 1).unwrap();
    assert_eq!(third.rows[0].status, "ok");
    assert_eq!(third.rows[1].status, "resumed");
    assert_eq!(read_summary_csv(&sweep_dir.path().join("summary.csv")).unwrap(), third.rows);

    let written = curves(sweep_dir.path()).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for want in ["zloss_1d.csv", "zloss_2d.csv", "loss_vs_lr.csv", "lrs_vs_size.csv", "diagnostics.csv"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
}

#[test]
fn curves_without_sweep_writes_symmetric_zloss_at_zero_mass() {
    let dir = tempdir().unwrap();
    let written = curves(dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    let text = fs::read_to_string(dir.path().join("curves/zloss_1d.csv")).unwrap();
    let at_zero: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .filter(|v| v[0] == 0.0)
        .map(|v| (v[1], v[2]))
        .collect();
    assert_eq!(at_zero.len(), 201);
    for (a, b) in at_zero.iter().zip(at_zero.iter().rev()) {
        assert!((a.0 + b.0).abs() < 1e-12);
        assert!((a.1 - b.1).abs() <= 1e-12 * a.1.max(1.0));
    }
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let dir = tempdir().unwrap();
    let config = ModelConfig {
        seq_len: 16,
        weight_tying: true,
        ..ModelConfig::sized(SizeTag::Tiny)
    };
    let params = ModelParams::<f32>::init(&config).unwrap();
    save_checkpoint(dir.path(), &params, 7).unwrap();
    let (manifest, back) = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(manifest.step, 7);
    assert_eq!(back.tensors(), params.tensors());
    assert_eq!(back.names(), params.names());

    let tensors = dir.path().join("tensors.bin");
    let mut bytes = fs::read(&tensors).unwrap();
    bytes.extend_from_slice(&[0; 16]);
    fs::write(&tensors, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}

#[test]
fn diverging_run_stops_and_reports_null_loss() {
    let corpus = Corpus::fixture();
    let dir = tempdir().unwrap();
    let mut c = tiny(dir.path(), HeadKind::Baseline, "boom");
    c.optim.peak_lr = 1e20;
    c.optim.warmup_steps = 0;
    let rec = run_train(&c, &corpus).unwrap();
    assert!(rec.summary.diverged);
    assert!(rec.summary.final_loss.is_nan());
    assert!(rec.summary.steps_completed < 10);
    let last = rec.samples.last().unwrap();
    assert!(last.diverged && last.test_loss.is_nan());
    let text = fs::read_to_string(dir.path().join("boom/summary.json")).unwrap();
    assert!(text.contains("\"final_loss\": null"), "{text}");
    let logged = read_metrics(&dir.path().join("boom/metrics.jsonl")).unwrap();
    assert_eq!(logged.len(), rec.samples.len());
}

#[test]
fn invalid_config_is_rejected_before_writing() {
    let dir = tempdir().unwrap();
    let mut c = tiny(dir.path(), HeadKind::ZLoss, "bad");
    c.head.lambda = -1.0;
    assert!(run_train(&c, &Corpus::fixture()).is_err());
    c = tiny(dir.path(), HeadKind::Baseline, "bad");
    c.eval_every = 3;
    assert!(matches!(run_train(&c, &Corpus::fixture()), Err(HarnessError::Config(_))));
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn out_env_overrides_config_and_grid_out_dir() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"run_id": "x", "out_dir": "somewhere"}"#).unwrap();
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"etas": [0.001], "base": {"out_dir": "elsewhere"}}"#).unwrap();
    assert_eq!(RunConfig::load(&cfg).unwrap().out_dir, Path::new("somewhere"));
    std::env::set_var(OUT_ENV, dir.path());
    let c = RunConfig::load(&cfg).unwrap();
    let g = SweepGrid::load(&grid).unwrap();
    std::env::remove_var(OUT_ENV);
    assert_eq!(c.out_dir, dir.path());
    assert_eq!(g.base.out_dir, dir.path());
    assert_eq!(g.cells().unwrap().len(), 5);
}

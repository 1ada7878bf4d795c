//! One training run: the step loop, periodic evaluation and the files a run
//! leaves behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, TENSORS_FILE};
use super::{io_err, json_err, write_json, HarnessError, RunConfig};
use crate::data::{sha256_hex, Batch, Corpus};
use crate::head::{head_loss_graph, mu_center_in_place, EmbeddingTable};
use crate::metrics::{self, nullable_f64, LogitStats, MetricSample, StatsAccumulator};
use crate::model::ModelParams;
use crate::nn::{self, Graph, Tensor};
use crate::optim::{adamw_step, clip_global_norm, OptimError, OptimState};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Steps dropped from the front before taking the median step time.
pub const TIMING_WARMUP: usize = 10;

/// Windows evaluated per graph.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub lr: f64,
    /// Training loss including auxiliary terms.
    pub loss: f64,
    pub data_loss: f64,
    pub clip_factor: f64,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean data loss over the fixed test windows.
    pub test_loss: f64,
    pub stats: LogitStats,
    pub mu_norm: f64,
    pub b_ratio: f64,
}

/// Model, optimizer state and data stream of one run, in `f32`.
pub struct Trainer<'c> {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
    pub state: OptimState<f32>,
    corpus: &'c Corpus,
    rng: ChaCha8Rng,
    test: Vec<Vec<u16>>,
    step: usize,
    diverged: bool,
}

impl<'c> Trainer<'c> {
    pub fn new(config: &RunConfig, corpus: &'c Corpus) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut params = ModelParams::<f32>::init(&config.model)?;
        if config.head.centers_after_step() {
            // Start from a centered table so the invariant holds at step 0.
            mu_center_in_place(params.output_tensor_mut());
        }
        let state = OptimState::new(params.tensors());
        let test = corpus.test_windows(config.model.seq_len, config.eval_windows())?;
        Ok(Self {
            config: config.clone(),
            params,
            state,
            corpus,
            rng: ChaCha8Rng::seed_from_u64(config.model.seed),
            test,
            step: 0,
            diverged: false,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Batch, forward, head loss, backward, clip, AdamW, then centering
    /// when the strategy asks for it.
    pub fn step(&mut self) -> Result<StepOutcome, HarnessError> {
        nn::flush_denormals();
        let seq = self.config.model.seq_len;
        let batch = self.corpus.next_batch(&mut self.rng, self.config.batch_size, seq)?;
        self.step += 1;
        let lr = self.config.optim.lr_at(self.step)?;
        let mut g = Graph::<f32>::new();
        let fwd = self
            .params
            .forward(&mut g, &batch.inputs(), batch.batch_size, seq, true)?;
        let loss = head_loss_graph(&mut g, fwd.table, fwd.hidden, &batch.targets(), &self.config.head)?;
        let total = g.scalar(loss.total) as f64;
        let data_loss = g.scalar(loss.data_loss) as f64;
        let mut outcome = StepOutcome {
            step: self.step,
            lr,
            loss: total,
            data_loss,
            clip_factor: 1.0,
            diverged: false,
        };
        if !total.is_finite() {
            self.diverged = true;
            outcome.diverged = true;
            return Ok(outcome);
        }
        g.backward(loss.total)?;
        let mut grads: Vec<Vec<f32>> = fwd
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
            .collect();
        drop(g);
        match clip_global_norm(&mut grads, self.config.optim.clip_norm) {
            Ok(f) => outcome.clip_factor = f,
            Err(OptimError::NonFinite) => {
                self.diverged = true;
                outcome.diverged = true;
                return Ok(outcome);
            }
            Err(e) => return Err(e.into()),
        }
        adamw_step(self.params.tensors_mut(), &grads, &mut self.state, lr, &self.config.optim)?;
        if self.config.head.centers_after_step() {
            mu_center_in_place(self.params.output_tensor_mut());
        }
        Ok(outcome)
    }

    /// Test loss and logit diagnostics on the fixed test windows.
    pub fn evaluate(&self) -> Result<Evaluation, HarnessError> {
        nn::flush_denormals();
        let mut acc = StatsAccumulator::default();
        let (mut loss_sum, mut rows) = (0.0, 0usize);
        for chunk in self.test.chunks(EVAL_CHUNK) {
            let b = Batch::from_windows(chunk);
            let mut g = Graph::<f32>::new();
            let fwd = self.params.forward(&mut g, &b.inputs(), b.batch_size, b.seq_len, false)?;
            let raw = g.matmul_nt(fwd.hidden, fwd.table)?;
            let emitted = if self.config.head.caps_logits() {
                g.soft_cap(raw, self.config.head.cap as f32)?
            } else {
                raw
            };
            let n = b.batch_size * b.seq_len;
            let loss = g.softmax_xent(emitted, &b.targets())?;
            loss_sum += g.scalar(loss) as f64 * n as f64;
            rows += n;
            acc.push(g.value(raw), g.value(emitted));
        }
        let table = self.params.output_tensor();
        let mu_norm = mean_embedding_norm(table);
        let b_ratio = match EmbeddingTable::new(table.clone(), self.config.model.weight_tying) {
            Ok(e) => metrics::b_ratio(&e).b_ratio,
            Err(_) => f64::NAN,
        };
        Ok(Evaluation {
            test_loss: loss_sum / rows.max(1) as f64,
            stats: acc.finish(),
            mu_norm,
            b_ratio,
        })
    }

    pub fn sample(&self, step_ms: f64) -> Result<MetricSample, HarnessError> {
        let e = self.evaluate()?;
        let lr = self.config.optim.lr_at(self.step)?;
        let mut s = MetricSample {
            step: self.step,
            test_loss: e.test_loss,
            lr,
            mu_norm: e.mu_norm,
            logit_mean: e.stats.mean,
            logit_std: e.stats.std,
            logit_max_abs: e.stats.max_abs,
            b_ratio: e.b_ratio,
            diverged: false,
            step_ms,
            logit_max_abs_raw: e.stats.raw_max_abs,
        };
        if self.diverged {
            s.test_loss = f64::NAN;
        }
        s.diverged = self.diverged || s.any_non_finite();
        Ok(s)
    }
}

fn mean_embedding_norm(table: &Tensor<f32>) -> f64 {
    // Column means in f64, also for tables that are no longer finite.
    let (v, h) = (table.rows(), table.cols());
    let mut mu = vec![0.0f64; h];
    for r in 0..v {
        for (m, &x) in mu.iter_mut().zip(table.row(r)) {
            *m += x as f64;
        }
    }
    mu.iter().map(|m| (m / v as f64).powi(2)).sum::<f64>().sqrt()
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub strategy: String,
    pub size: String,
    pub eta: f64,
    pub lambda: f64,
    pub cap: f64,
    pub tying: bool,
    pub total_steps: usize,
    pub steps_completed: usize,
    /// Test loss of the freshly initialized model.
    #[serde(with = "nullable_f64")]
    pub init_loss: f64,
    /// Test loss after the last step; `null` for diverged runs.
    #[serde(with = "nullable_f64")]
    pub final_loss: f64,
    pub diverged: bool,
    pub mean_step_ms: f64,
    /// Median over steps after the first few.
    pub median_step_ms: f64,
    pub num_params: usize,
    pub corpus_digest: String,
    pub metrics_sha256: String,
    pub tensors_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub samples: Vec<MetricSample>,
    pub step_ms: Vec<f64>,
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub(crate) fn median_after_warmup(step_ms: &[f64]) -> f64 {
    median(step_ms.get(TIMING_WARMUP..).filter(|s| !s.is_empty()).unwrap_or(step_ms))
}

fn write_sample(w: &mut impl Write, s: &MetricSample, path: &Path) -> Result<(), HarnessError> {
    serde_json::to_writer(&mut *w, s).map_err(json_err(path))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Trains one model and writes its run directory.
pub fn run_train(config: &RunConfig, corpus: &Corpus) -> Result<RunRecord, HarnessError> {
    config.validate()?;
    let dir = config.run_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut out = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);

    log::info!(
        "run {}: {} eta={} steps={}",
        config.run_id,
        config.head.kind,
        config.optim.peak_lr,
        config.optim.total_steps
    );
    let mut trainer = Trainer::new(config, corpus)?;
    let first = trainer.sample(0.0)?;
    write_sample(&mut out, &first, &metrics_path)?;
    let init_loss = first.test_loss;
    let mut samples = vec![first];
    let mut step_ms = Vec::with_capacity(config.optim.total_steps);
    let mut since_eval = Vec::new();
    let mut final_loss = f64::NAN;

    for step in 1..=config.optim.total_steps {
        let t0 = Instant::now();
        let outcome = trainer.step()?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        step_ms.push(ms);
        since_eval.push(ms);
        let at_eval = step % config.eval_every == 0;
        if outcome.diverged || at_eval {
            let mean_ms = if config.record_timing {
                since_eval.iter().sum::<f64>() / since_eval.len() as f64
            } else {
                0.0
            };
            since_eval.clear();
            let s = trainer.sample(mean_ms)?;
            write_sample(&mut out, &s, &metrics_path)?;
            let stop = s.diverged;
            if step == config.optim.total_steps && !stop {
                final_loss = s.test_loss;
            }
            samples.push(s);
            if stop {
                log::warn!("run {} diverged at step {step}", config.run_id);
                break;
            }
        }
    }
    drop(out);

    save_checkpoint(&dir, &trainer.params, trainer.step_count())?;
    let digest = |name: &str| -> Result<String, HarnessError> {
        let p = dir.join(name);
        Ok(sha256_hex(&fs::read(&p).map_err(io_err(&p))?))
    };
    let diverged = samples.last().is_some_and(|s| s.diverged);
    let summary = RunSummary {
        run_id: config.run_id.clone(),
        strategy: config.head.kind.to_string(),
        size: config.size_tag(),
        eta: config.optim.peak_lr,
        lambda: config.head.lambda,
        cap: config.head.cap,
        tying: config.model.weight_tying,
        total_steps: config.optim.total_steps,
        steps_completed: trainer.step_count(),
        init_loss,
        final_loss: if diverged { f64::NAN } else { final_loss },
        diverged,
        mean_step_ms: step_ms.iter().sum::<f64>() / step_ms.len().max(1) as f64,
        median_step_ms: median_after_warmup(&step_ms),
        num_params: trainer.params.num_params(),
        corpus_digest: corpus.digest().to_string(),
        metrics_sha256: digest(METRICS_FILE)?,
        tensors_sha256: digest(TENSORS_FILE)?,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    log::info!(
        "run {} done: final_loss={} diverged={} median_step_ms={:.1}",
        config.run_id,
        summary.final_loss,
        summary.diverged,
        summary.median_step_ms
    );
    Ok(RunRecord {
        summary,
        samples,
        step_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::mean_embedding;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        let mut v = vec![100.0; TIMING_WARMUP];
        v.extend([1.0, 2.0, 3.0]);
        assert_eq!(median_after_warmup(&v), 2.0);
        assert_eq!(median_after_warmup(&[5.0, 7.0]), 6.0);
    }

    #[test]
    fn mu_norm_of_centered_table_is_tiny() {
        let mut t = Tensor::<f32>::from_fn(vec![257, 64], |i| ((i * 7919) % 101) as f32 / 50.0);
        mu_center_in_place(&mut t);
        assert!(mean_embedding_norm(&t) <= 1e-5);
        let e = EmbeddingTable::new(t, false).unwrap();
        let mu = mean_embedding(&e);
        assert!(mu.iter().all(|m| m.abs() <= 1e-5));
    }
}

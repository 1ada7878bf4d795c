//! Stability diagnostics: the centering bound ratio, learning-rate
//! sensitivity, and pooled logit statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{compute_logits, mean_embedding, soft_cap, EmbeddingTable, HeadError, HeadStrategy};
use crate::nn::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("learning-rate grid is empty")]
    EmptyGrid,
    #[error("grid has {etas} learning rates but {losses} losses")]
    LengthMismatch { etas: usize, losses: usize },
    #[error("initial loss must be finite, got {0}")]
    InitLoss(f64),
    #[error("no hidden states to sample")]
    NoSamples,
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// Tight bounds of `d_i = e_i . mu` around `||mu||^2` and the resulting ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BRatioRecord {
    pub mu_norm_sq: f64,
    /// `||mu||^2 - min_i d_i`
    pub b_minus: f64,
    /// `max_i d_i - ||mu||^2`
    pub b_plus: f64,
    pub b_ratio: f64,
    /// Set when every `d_i` is zero (a centered table); the ratio is then 1.
    pub degenerate: bool,
}

/// Ratio of the worst-case `|e . mu|` after centering to the one before,
/// expressed through the bounds `B-`, `B+` and `||mu||^2`.
pub fn b_ratio_from_bounds(b_minus: f64, b_plus: f64, mu_norm_sq: f64) -> f64 {
    let num = b_minus.max(b_plus);
    let den = (b_minus - mu_norm_sq).max(b_plus + mu_norm_sq);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn b_ratio<T: Real>(e: &EmbeddingTable<T>) -> BRatioRecord {
    let mu: Vec<f64> = mean_embedding(e).iter().map(|v| v.as_f64()).collect();
    let mu_norm_sq: f64 = mu.iter().map(|m| m * m).sum();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in e.rows() {
        let d: f64 = row.iter().zip(&mu).map(|(x, m)| x.as_f64() * m).sum();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let b_minus = mu_norm_sq - lo;
    let b_plus = hi - mu_norm_sq;
    let degenerate = lo == 0.0 && hi == 0.0;
    BRatioRecord {
        mu_norm_sq,
        b_minus,
        b_plus,
        b_ratio: if degenerate {
            1.0
        } else {
            b_ratio_from_bounds(b_minus, b_plus, mu_norm_sq)
        },
        degenerate,
    }
}

/// Outcome of comparing the bound ratio against the embedding norms it
/// predicts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenteringBoundCheck {
    pub b_ratio: f64,
    pub max_norm_before: f64,
    pub max_norm_after: f64,
    /// `(b_ratio <= 1) == (max_norm_after <= max_norm_before)`
    pub consistent: bool,
    /// The norm argument is exact only when the largest parallel and the
    /// largest perpendicular component (w.r.t. `mu`) sit on the same row,
    /// both before and after centering. Inconsistencies are only meaningful
    /// when this holds.
    pub tight: bool,
}

pub fn check_centering_bound<T: Real>(e: &EmbeddingTable<T>) -> CenteringBoundCheck {
    let record = b_ratio(e);
    let mu: Vec<f64> = mean_embedding(e).iter().map(|v| v.as_f64()).collect();
    let mu_norm = record.mu_norm_sq.sqrt();
    let mut par_before = Vec::with_capacity(e.vocab());
    let mut par_after = Vec::with_capacity(e.vocab());
    let mut perp = Vec::with_capacity(e.vocab());
    let (mut max_before, mut max_after) = (0.0f64, 0.0f64);
    for row in e.rows() {
        let x: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let centered_sq: f64 = x.iter().zip(&mu).map(|(v, m)| (v - m) * (v - m)).sum();
        max_before = max_before.max(sq.sqrt());
        max_after = max_after.max(centered_sq.sqrt());
        if mu_norm > 0.0 {
            let p = x.iter().zip(&mu).map(|(v, m)| v * m).sum::<f64>() / mu_norm;
            par_before.push(p.abs());
            par_after.push((p - mu_norm).abs());
            perp.push((sq - p * p).max(0.0));
        }
    }
    // Maxima are compared up to rounding: with H = 1 every perpendicular
    // part is zero in exact arithmetic but not in floating point.
    const ROUNDING: f64 = 1e-12;
    let tight = mu_norm == 0.0 || {
        let top_perp = perp.iter().copied().fold(0.0, f64::max);
        let perp_tol = ROUNDING * max_before * max_before;
        let attains = |par: &[f64]| {
            let top = par.iter().copied().fold(0.0, f64::max);
            par.iter()
                .zip(&perp)
                .any(|(&a, &b)| a >= top * (1.0 - ROUNDING) && b >= top_perp - perp_tol)
        };
        attains(&par_before) && attains(&par_after)
    };
    CenteringBoundCheck {
        b_ratio: record.b_ratio,
        max_norm_before: max_before,
        max_norm_after: max_after,
        consistent: (record.b_ratio <= 1.0) == (max_after <= max_before),
        tight,
    }
}

/// Final losses of one learning-rate grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LrsInput {
    pub eta_grid: Vec<f64>,
    /// May contain NaN or infinities for diverged runs.
    pub final_losses: Vec<f64>,
    /// Loss at initialization; the clipping ceiling.
    pub init_loss: f64,
}

/// Learning-rate sensitivity: mean over the grid of
/// `min(L(eta), L0) - min_eta min(L(eta), L0)`. Non-finite losses count as
/// `L0`.
pub fn lrs(input: &LrsInput) -> Result<f64, MetricsError> {
    if input.eta_grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if input.eta_grid.len() != input.final_losses.len() {
        return Err(MetricsError::LengthMismatch {
            etas: input.eta_grid.len(),
            losses: input.final_losses.len(),
        });
    }
    if !input.init_loss.is_finite() {
        return Err(MetricsError::InitLoss(input.init_loss));
    }
    let clipped: Vec<f64> = input
        .final_losses
        .iter()
        .map(|&l| if l.is_finite() { l.min(input.init_loss) } else { input.init_loss })
        .collect();
    let best = clipped.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(clipped.iter().map(|l| l - best).sum::<f64>() / clipped.len() as f64)
}

/// Pooled statistics over every logit of every sampled hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
    /// Max magnitude before soft-capping; equals `max_abs` for other heads.
    pub raw_max_abs: f64,
    pub count: usize,
}

pub fn sample_logit_stats<T: Real, H: AsRef<[T]>>(
    e: &EmbeddingTable<T>,
    hidden_states: &[H],
    strategy: &HeadStrategy,
) -> Result<LogitStats, MetricsError> {
    if hidden_states.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut acc = StatsAccumulator::default();
    for h in hidden_states {
        let raw = compute_logits(e, h.as_ref())?;
        let emitted = if strategy.caps_logits() {
            soft_cap(&raw, strategy.cap)
        } else {
            raw.clone()
        };
        acc.push(&raw, &emitted);
    }
    Ok(acc.finish())
}

/// Streaming accumulator behind [`sample_logit_stats`], also usable on
/// logits that were already computed elsewhere.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    count: usize,
    sum: f64,
    sum_sq: f64,
    max_abs: f64,
    raw_max_abs: f64,
    non_finite: bool,
}

impl StatsAccumulator {
    pub fn push<T: Real>(&mut self, raw: &[T], emitted: &[T]) {
        for &l in emitted {
            let l = l.as_f64();
            self.non_finite |= !l.is_finite();
            self.sum += l;
            self.sum_sq += l * l;
            self.max_abs = self.max_abs.max(l.abs());
        }
        for &l in raw {
            let l = l.as_f64();
            self.non_finite |= !l.is_finite();
            self.raw_max_abs = self.raw_max_abs.max(l.abs());
        }
        self.count += emitted.len();
    }

    pub fn finish(&self) -> LogitStats {
        if self.non_finite {
            return LogitStats {
                mean: f64::NAN,
                std: f64::NAN,
                max_abs: f64::NAN,
                raw_max_abs: f64::NAN,
                count: self.count,
            };
        }
        let n = self.count.max(1) as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        LogitStats {
            mean,
            std: var.sqrt(),
            max_abs: self.max_abs,
            raw_max_abs: self.raw_max_abs,
            count: self.count,
        }
    }
}

/// Point-in-time diagnostics of a run; one row of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub step: usize,
    /// Data loss on the fixed test windows; `null` when non-finite.
    #[serde(with = "nullable_f64")]
    pub test_loss: f64,
    pub lr: f64,
    #[serde(with = "nullable_f64")]
    pub mu_norm: f64,
    #[serde(with = "nullable_f64")]
    pub logit_mean: f64,
    #[serde(with = "nullable_f64")]
    pub logit_std: f64,
    #[serde(with = "nullable_f64")]
    pub logit_max_abs: f64,
    #[serde(with = "nullable_f64")]
    pub b_ratio: f64,
    pub diverged: bool,
    pub step_ms: f64,
    /// Pre-cap maximum for soft-capped heads; same as `logit_max_abs` otherwise.
    #[serde(with = "nullable_f64", default = "nan")]
    pub logit_max_abs_raw: f64,
}

fn nan() -> f64 {
    f64::NAN
}

impl MetricSample {
    /// `diverged` must be set iff a loss or logit statistic is non-finite.
    pub fn any_non_finite(&self) -> bool {
        [
            self.test_loss,
            self.logit_mean,
            self.logit_std,
            self.logit_max_abs,
        ]
        .iter()
        .any(|v| !v.is_finite())
    }
}

/// Serializes non-finite floats as JSON `null` and reads `null` back as NaN.
pub mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{mu_center, HeadKind};
    use crate::nn::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(rng: &mut ChaCha8Rng, v: usize, h: usize, shift: f64) -> EmbeddingTable<f64> {
        let t = Tensor::from_fn(vec![v, h], |i| rng.random_range(-1.0..1.0) + shift * (i % h) as f64);
        EmbeddingTable::new(t, false).unwrap()
    }

    #[test]
    fn worked_example_bounds() {
        let r = b_ratio_from_bounds(7.8, 4.7, 4.9);
        assert!((r - 0.8125).abs() < 1e-12);
        assert_eq!((r * 100.0).round() / 100.0, 0.81);
        assert!((r - 0.82).abs() < 0.01);
    }

    #[test]
    fn centered_table_is_degenerate() {
        let e = EmbeddingTable::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let r = b_ratio(&e);
        assert!(r.degenerate);
        assert_eq!(r.b_ratio, 1.0);
        assert_eq!(mu_center(&e), e);
    }

    #[test]
    fn tight_bounds_are_attained() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = random_table(&mut rng, 20, 4, 0.7);
        let r = b_ratio(&e);
        let mu = mean_embedding(&e);
        let d: Vec<f64> = e.rows().map(|row| row.iter().zip(&mu).map(|(a, b)| a * b).sum()).collect();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((r.mu_norm_sq - r.b_minus - lo).abs() < 1e-12);
        assert!((r.mu_norm_sq + r.b_plus - hi).abs() < 1e-12);
        assert!(r.b_ratio >= 0.0);
    }

    #[test]
    fn alternative_form_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let v = rng.random_range(1..40);
            let h = rng.random_range(1..8);
            let shift = rng.random_range(0.0..2.0);
            let e = random_table(&mut rng, v, h, shift);
            let mu = mean_embedding(&e);
            let c = mu_center(&e);
            let dmax = |t: &EmbeddingTable<f64>| {
                t.rows()
                    .map(|r| r.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>().abs())
                    .fold(0.0, f64::max)
            };
            let r = b_ratio(&e);
            if r.degenerate {
                continue;
            }
            let alt = dmax(&c) / dmax(&e);
            assert!((r.b_ratio - alt).abs() <= 1e-9 * alt.abs().max(1e-300), "{} vs {alt}", r.b_ratio);
        }
    }

    #[test]
    fn centering_bound_shifted_table() {
        // A strong common shift: centering must shrink both the ratio and norms.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Tensor::from_fn(vec![50, 6], |_| 3.0 + rng.random_range(-1.0..1.0));
        let e = EmbeddingTable::new(t, false).unwrap();
        let c = check_centering_bound(&e);
        assert!(c.b_ratio <= 1.0);
        assert!(c.max_norm_after <= c.max_norm_before);
        assert!(c.consistent);
    }

    #[test]
    fn centering_bound_centered_table() {
        let e = EmbeddingTable::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap();
        let c = check_centering_bound(&e);
        assert_eq!(c.b_ratio, 1.0);
        assert_eq!(c.max_norm_after, c.max_norm_before);
        assert!(c.consistent && c.tight);
    }

    #[test]
    fn lrs_examples() {
        let input = LrsInput {
            eta_grid: vec![1e-3, 1e-2, 1e-1],
            final_losses: vec![3.0, 3.2, f64::NAN],
            init_loss: 5.0,
        };
        assert!((lrs(&input).unwrap() - 2.2 / 3.0).abs() < 1e-12);
        let flat = LrsInput {
            eta_grid: vec![1.0, 2.0],
            final_losses: vec![4.0, 4.0],
            init_loss: 5.0,
        };
        assert_eq!(lrs(&flat).unwrap(), 0.0);
        let single = LrsInput {
            eta_grid: vec![1.0],
            final_losses: vec![7.0],
            init_loss: 5.0,
        };
        assert_eq!(lrs(&single).unwrap(), 0.0);
        let empty = LrsInput {
            eta_grid: vec![],
            final_losses: vec![],
            init_loss: 5.0,
        };
        assert_eq!(lrs(&empty), Err(MetricsError::EmptyGrid));
    }

    #[test]
    fn infinite_loss_clips_to_init() {
        let a = LrsInput {
            eta_grid: vec![1.0, 2.0],
            final_losses: vec![3.0, f64::INFINITY],
            init_loss: 5.0,
        };
        let b = LrsInput {
            final_losses: vec![3.0, 5.0],
            ..a.clone()
        };
        assert_eq!(lrs(&a).unwrap(), lrs(&b).unwrap());
    }

    proptest! {
        #[test]
        fn lrs_nonnegative_and_monotone(
            losses in prop::collection::vec(prop_oneof![0.0f64..10.0, Just(f64::NAN)], 1..8),
            bump in 0.0f64..3.0,
            idx in any::<prop::sample::Index>(),
        ) {
            let init = 6.0;
            let etas: Vec<f64> = (0..losses.len()).map(|i| i as f64).collect();
            let base = lrs(&LrsInput { eta_grid: etas.clone(), final_losses: losses.clone(), init_loss: init }).unwrap();
            prop_assert!(base >= 0.0);
            // Raising the grid minimum lowers every excess, so monotonicity
            // only holds for the other entries.
            let clip = |l: f64| if l.is_finite() { l.min(init) } else { init };
            let best = losses.iter().map(|&l| clip(l)).fold(f64::INFINITY, f64::min);
            let i = idx.index(losses.len());
            let at_min = losses.iter().filter(|&&l| clip(l) == best).count() == 1 && clip(losses[i]) == best;
            let mut raised = losses.clone();
            raised[i] += bump;
            let after = lrs(&LrsInput { eta_grid: etas.clone(), final_losses: raised, init_loss: init }).unwrap();
            if !at_min {
                prop_assert!(after >= base - 1e-12);
            }
            let mut rev = losses.clone();
            rev.reverse();
            let r = lrs(&LrsInput { eta_grid: etas, final_losses: rev, init_loss: init }).unwrap();
            prop_assert!((r - base).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_stats_examples() {
        let e = EmbeddingTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = sample_logit_stats(&e, &[vec![0.0, 0.0]], &HeadStrategy::default()).unwrap();
        assert_eq!((s.mean, s.std, s.max_abs), (0.0, 0.0, 0.0));
        let s = sample_logit_stats(&e, &[vec![3.0, -2.0]], &HeadStrategy::default()).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.std - 2.5).abs() < 1e-15);
        assert_eq!(s.max_abs, 3.0);
        assert!(sample_logit_stats::<f64, Vec<f64>>(&e, &[], &HeadStrategy::default()).is_err());
    }

    #[test]
    fn soft_cap_stats_report_raw_max() {
        let e = EmbeddingTable::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let s = HeadStrategy::new(HeadKind::SoftCap).with_cap(2.0);
        let st = sample_logit_stats(&e, &[vec![10.0]], &s).unwrap();
        assert_eq!(st.raw_max_abs, 10.0);
        assert!(st.max_abs < 2.0);
    }

    #[test]
    fn centered_stats_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = Tensor::<f32>::from_fn(vec![64, 8], |_| rng.random_range(0.0f32..2.0));
        let e = crate::head::mu_center(&EmbeddingTable::new(t, false).unwrap());
        for _ in 0..20 {
            let h: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let s = sample_logit_stats(&e, &[h], &HeadStrategy::default()).unwrap();
            assert!(s.mean.abs() <= 1e-6, "{}", s.mean);
        }
    }

    #[test]
    fn metric_sample_null_round_trip() {
        let m = MetricSample {
            step: 3,
            test_loss: f64::NAN,
            lr: 1e-3,
            mu_norm: 0.5,
            logit_mean: 0.0,
            logit_std: 1.0,
            logit_max_abs: 2.0,
            b_ratio: 0.9,
            diverged: true,
            step_ms: 1.5,
            logit_max_abs_raw: 2.0,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"test_loss\":null"));
        let back: MetricSample = serde_json::from_str(&s).unwrap();
        assert!(back.test_loss.is_nan());
        assert!(back.any_non_finite());
    }
}

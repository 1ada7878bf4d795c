//! AdamW with linear warmup, cosine decay and global-norm clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("step {step} outside schedule [0, {total}]")]
    Step { step: usize, total: usize },
    #[error("gradient is not finite")]
    NonFinite,
    #[error("parameter {index}: expected {expected} values, got {got}")]
    Shape {
        index: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            warmup_steps: 100,
            total_steps: 2000,
            min_lr: 1e-5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return bad(format!("need 0 <= min_lr {} <= peak_lr {}", self.min_lr, self.peak_lr));
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps and clip_norm must be positive, weight_decay nonnegative".into());
        }
        Ok(())
    }

    /// Learning rate at `step`: a ramp from 0 to the peak over the warmup,
    /// then cosine decay to `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::Step {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.peak_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min_lr + (self.peak_lr - self.min_lr) * cosine)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm` and
/// returns the factor used. Non-finite gradients are left untouched.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> Result<f64, OptimError> {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum();
    if !sq.is_finite() {
        return Err(OptimError::NonFinite);
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    let f = T::of(factor);
    grads.iter_mut().flatten().for_each(|g| *g *= f);
    Ok(factor)
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Decay {
    Decoupled,
    L2,
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    lr: f64,
    config: &OptimConfig,
) -> Result<(), OptimError> {
    step(params, grads, state, lr, config, Decay::Decoupled)
}

/// One Adam update with weight decay folded into the gradient.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    lr: f64,
    config: &OptimConfig,
) -> Result<(), OptimError> {
    step(params, grads, state, lr, config, Decay::L2)
}

fn step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    lr: f64,
    config: &OptimConfig,
    decay: Decay,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::Shape {
            index: params.len(),
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(OptimError::Shape {
                index: i,
                expected: p.numel(),
                got: g.len(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::of(1.0 - config.beta1.powi(t));
    let bc2 = T::of(1.0 - config.beta2.powi(t));
    let (lr, eps, wd) = (T::of(lr), T::of(config.eps), T::of(config.weight_decay));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.values_mut().iter_mut().enumerate() {
            let gj = if decay == Decay::L2 { g[j] + wd * *w } else { g[j] };
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            *w -= if decay == Decay::Decoupled {
                lr * (update + wd * *w)
            } else {
                lr * update
            };
        }
    }
    Ok(())
}

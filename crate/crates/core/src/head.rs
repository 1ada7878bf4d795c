//! Language-modeling head: output embedding table, logits, and the five
//! head strategies.
//!
//! Two routes are provided. The plain functions ([`compute_logits`],
//! [`head_loss`], ...) evaluate one hidden vector with explicit loops and
//! serve as the reference; [`head_loss_graph`] builds the same loss on an
//! autodiff [`Graph`] for a batch of hidden states and is what training
//! differentiates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Graph, NnError, Real, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("target {target} out of range for vocabulary of {vocab}")]
    Target { target: usize, vocab: usize },
    #[error("invalid head strategy: {0}")]
    Strategy(String),
    #[error("embedding table contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Graph(#[from] NnError),
}

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_CAP: f64 = 30.0;

/// `V x H` output embedding table, one row `e_i` per token.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    table: Tensor<T>,
    pub tied: bool,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(table: Tensor<T>, tied: bool) -> Result<Self, HeadError> {
        let shape = table.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(HeadError::Dimension(format!(
                "embedding table must be V x H with V, H >= 1, got {shape:?}"
            )));
        }
        if !table.is_finite() {
            return Err(HeadError::NonFinite);
        }
        Ok(Self { table, tied })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, HeadError> {
        let t = Tensor::matrix(rows)?;
        Self::new(t, false)
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.table.row(i)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.table.values().chunks(self.hidden())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.table
    }

    pub fn cast<U: Real>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            table: self.table.cast(),
            tied: self.tied,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Baseline,
    ZLoss,
    SoftCap,
    MuLoss,
    MuCenter,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Baseline,
        HeadKind::SoftCap,
        HeadKind::ZLoss,
        HeadKind::MuLoss,
        HeadKind::MuCenter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::ZLoss => "z_loss",
            HeadKind::SoftCap => "soft_cap",
            HeadKind::MuLoss => "mu_loss",
            HeadKind::MuCenter => "mu_center",
        }
    }

    /// Whether `lambda` affects this strategy.
    pub fn uses_lambda(self) -> bool {
        matches!(self, HeadKind::ZLoss | HeadKind::MuLoss)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HeadError::Strategy(format!("unknown head kind {s:?}")))
    }
}

/// Head strategy with its hyperparameters. `lambda` only matters for
/// `z_loss`/`mu_loss`, `cap` only for `soft_cap`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadStrategy {
    pub kind: HeadKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_cap() -> f64 {
    DEFAULT_CAP
}

impl Default for HeadStrategy {
    fn default() -> Self {
        Self::new(HeadKind::Baseline)
    }
}

impl HeadStrategy {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            lambda: DEFAULT_LAMBDA,
            cap: DEFAULT_CAP,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = cap;
        self
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(HeadError::Strategy(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.cap > 0.0 && self.cap.is_finite()) {
            return Err(HeadError::Strategy(format!(
                "cap must be finite and > 0, got {}",
                self.cap
            )));
        }
        Ok(())
    }

    /// Whether the head applies soft-capping between logits and softmax.
    pub fn caps_logits(&self) -> bool {
        self.kind == HeadKind::SoftCap
    }

    /// Whether the output table is re-centered after every optimizer step.
    pub fn centers_after_step(&self) -> bool {
        self.kind == HeadKind::MuCenter
    }
}

/// Logits together with their normalizer and probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitView {
    pub logits: Vec<f64>,
    /// `log Z`, always finite for finite logits.
    pub log_z: f64,
    /// `Z = sum_j exp(l_j)`; may overflow to infinity.
    pub z: f64,
    pub probs: Vec<f64>,
}

impl LogitView {
    pub fn new<T: Real>(logits: &[T]) -> Self {
        let logits: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
        let log_z = m + shifted.ln();
        let probs = logits.iter().map(|&l| (l - log_z).exp()).collect();
        Self {
            z: m.exp() * shifted,
            log_z,
            logits,
            probs,
        }
    }
}

fn check_hidden<T: Real>(e: &EmbeddingTable<T>, h: &[T]) -> Result<(), HeadError> {
    if h.len() != e.hidden() {
        return Err(HeadError::Dimension(format!(
            "hidden state has {} entries, table width is {}",
            h.len(),
            e.hidden()
        )));
    }
    Ok(())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn norm<T: Real>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// `l_i = e_i . h` for every token.
pub fn compute_logits<T: Real>(e: &EmbeddingTable<T>, h: &[T]) -> Result<Vec<T>, HeadError> {
    check_hidden(e, h)?;
    Ok(e.rows().map(|row| T::of(dot(row, h))).collect())
}

/// Mean output embedding `mu = (1/V) sum_i e_i`.
pub fn mean_embedding<T: Real>(e: &EmbeddingTable<T>) -> Vec<T> {
    let mut acc = vec![0.0f64; e.hidden()];
    for row in e.rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    let inv = 1.0 / e.vocab() as f64;
    acc.into_iter().map(|a| T::of(a * inv)).collect()
}

/// Mean logit via `mu . h`, which equals the average of [`compute_logits`].
pub fn mean_logit<T: Real>(e: &EmbeddingTable<T>, h: &[T]) -> Result<f64, HeadError> {
    check_hidden(e, h)?;
    Ok(dot(&mean_embedding(e), h))
}

/// Global bound `max_i ||e_i|| * ||h||` on every logit magnitude.
pub fn logit_bound<T: Real>(e: &EmbeddingTable<T>, h: &[T]) -> Result<f64, HeadError> {
    check_hidden(e, h)?;
    let max_row = e.rows().map(norm).fold(0.0, f64::max);
    Ok(max_row * norm(h))
}

/// `lambda * log^2(Z)` with `log Z` from a max-shifted log-sum-exp.
pub fn z_loss_term<T: Real>(logits: &[T], lambda: f64) -> f64 {
    let log_z = LogitView::new(logits).log_z;
    lambda * log_z * log_z
}

/// Elementwise `cap * tanh(l / cap)`.
pub fn soft_cap<T: Real>(logits: &[T], cap: f64) -> Vec<T> {
    logits
        .iter()
        .map(|&l| T::of(cap * (l.as_f64() / cap).tanh()))
        .collect()
}

/// `lambda * (mu . mu)`.
pub fn mu_loss_term<T: Real>(e: &EmbeddingTable<T>, lambda: f64) -> f64 {
    let mu = mean_embedding(e);
    lambda * dot(&mu, &mu)
}

/// Returns the table with its mean row subtracted from every row.
pub fn mu_center<T: Real>(e: &EmbeddingTable<T>) -> EmbeddingTable<T> {
    let mut out = e.clone();
    mu_center_in_place(&mut out.table);
    out
}

/// Subtracts the column means of a `V x H` tensor from each of its rows.
pub fn mu_center_in_place<T: Real>(table: &mut Tensor<T>) {
    let (v, h) = (table.rows(), table.cols());
    if v == 0 {
        return;
    }
    let mut mu = vec![0.0f64; h];
    for r in 0..v {
        for (m, x) in mu.iter_mut().zip(table.row(r)) {
            *m += x.as_f64();
        }
    }
    mu.iter_mut().for_each(|m| *m /= v as f64);
    for r in 0..v {
        for (x, m) in table.row_mut(r).iter_mut().zip(&mu) {
            *x = T::of(x.as_f64() - m);
        }
    }
}

/// Training loss of one hidden vector under `strategy`. `mu_center` scores
/// like the baseline: its centering happens outside the loss.
pub fn head_loss<T: Real>(
    e: &EmbeddingTable<T>,
    h: &[T],
    target: usize,
    strategy: &HeadStrategy,
) -> Result<f64, HeadError> {
    strategy.validate()?;
    if target >= e.vocab() {
        return Err(HeadError::Target {
            target,
            vocab: e.vocab(),
        });
    }
    let mut logits = compute_logits(e, h)?;
    if strategy.caps_logits() {
        logits = soft_cap(&logits, strategy.cap);
    }
    let view = LogitView::new(&logits);
    let data = view.log_z - view.logits[target];
    Ok(match strategy.kind {
        HeadKind::ZLoss => data + strategy.lambda * view.log_z * view.log_z,
        HeadKind::MuLoss => data + mu_loss_term(e, strategy.lambda),
        HeadKind::Baseline | HeadKind::SoftCap | HeadKind::MuCenter => data,
    })
}

/// `(l, lambda * log^2(exp(l) + S))` along `grid`, where `S` stands for the
/// summed exponentials of all other logits.
pub fn zloss_1d_curve(s: f64, grid: &[f64], lambda: f64) -> Result<Vec<(f64, f64)>, HeadError> {
    if !(s >= 0.0) {
        return Err(HeadError::Strategy(format!("S must be >= 0, got {s}")));
    }
    Ok(grid
        .iter()
        .map(|&l| {
            let log_z = if s == 0.0 {
                l
            } else {
                let ls = s.ln();
                let m = l.max(ls);
                m + ((l - m).exp() + (ls - m).exp()).ln()
            };
            (l, lambda * log_z * log_z)
        })
        .collect())
}

/// Graph handles produced by [`head_loss_graph`].
#[derive(Clone, Copy, Debug)]
pub struct HeadLoss {
    /// Logits as emitted by the head (capped for `soft_cap`).
    pub logits: Var,
    /// Mean cross-entropy without auxiliary terms.
    pub data_loss: Var,
    /// Data loss plus any z-loss or mu-loss term; differentiate this.
    pub total: Var,
}

/// Records the batched head loss for `hidden [N, H]` against `table [V, H]`.
pub fn head_loss_graph<T: Real>(
    g: &mut Graph<T>,
    table: Var,
    hidden: Var,
    targets: &[usize],
    strategy: &HeadStrategy,
) -> Result<HeadLoss, HeadError> {
    strategy.validate()?;
    let mut logits = g.matmul_nt(hidden, table)?;
    if strategy.caps_logits() {
        logits = g.soft_cap(logits, T::of(strategy.cap))?;
    }
    let data_loss = g.softmax_xent(logits, targets)?;
    let total = match strategy.kind {
        HeadKind::ZLoss => {
            let lse = g.log_sum_exp_rows(logits);
            let sq = g.square(lse);
            let m = g.mean(sq);
            let term = g.scale(m, T::of(strategy.lambda));
            g.add(data_loss, term)?
        }
        HeadKind::MuLoss => {
            let mu = g.column_mean(table);
            let sq = g.square(mu);
            let s = g.sum(sq);
            let term = g.scale(s, T::of(strategy.lambda));
            g.add(data_loss, term)?
        }
        HeadKind::Baseline | HeadKind::SoftCap | HeadKind::MuCenter => data_loss,
    };
    Ok(HeadLoss {
        logits,
        data_loss,
        total,
    })
}

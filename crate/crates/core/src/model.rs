//! Decoder-only transformer backbone: pre-norm blocks with RoPE, per-head
//! qk-layernorm, causal attention and a SwiGLU feed-forward, no biases.
//!
//! Parameters are a flat, named tensor list so checkpoints, the optimizer
//! and gradient checks all walk the same order. With weight tying the input
//! embedding doubles as the output table and exists exactly once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{EmbeddingTable, HeadError};
use crate::nn::{rope_frequency, Graph, NnError, Real, Tensor, Var};

pub const ROPE_BASE: f64 = 10_000.0;
/// Byte values plus BOS.
pub const BYTE_VOCAB: usize = 257;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds seq_len {max}")]
    Sequence { len: usize, max: usize },
    #[error("missing or malformed parameter {0}")]
    Param(String),
    #[error(transparent)]
    Graph(#[from] NnError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// Desk-scale model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeTag {
    Tiny,
    Small,
    Medium,
}

impl SizeTag {
    pub const ALL: [SizeTag; 3] = [SizeTag::Tiny, SizeTag::Small, SizeTag::Medium];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeTag::Tiny => "tiny",
            SizeTag::Small => "small",
            SizeTag::Medium => "medium",
        }
    }

    /// `(n_layers, hidden_dim, n_heads)`
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizeTag::Tiny => (2, 32, 2),
            SizeTag::Small => (4, 64, 4),
            SizeTag::Medium => (6, 96, 6),
        }
    }
}

impl std::fmt::Display for SizeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SizeTag {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SizeTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown size tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub weight_tying: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::sized(SizeTag::Small)
    }
}

impl ModelConfig {
    /// Byte-vocabulary model of the given size with `ffn_dim = 4H` and
    /// 256-token context.
    pub fn sized(tag: SizeTag) -> Self {
        let (n_layers, hidden_dim, n_heads) = tag.dims();
        Self {
            vocab_size: BYTE_VOCAB,
            hidden_dim,
            n_layers,
            n_heads,
            ffn_dim: 4 * hidden_dim,
            seq_len: 256,
            weight_tying: false,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h, f, hd) = (self.vocab_size, self.hidden_dim, self.ffn_dim, self.head_dim());
        let mut out = vec![("embed".to_string(), vec![v, h])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("attn_norm"), vec![h]),
                (p("wq"), vec![h, h]),
                (p("wk"), vec![h, h]),
                (p("wv"), vec![h, h]),
                (p("q_norm"), vec![hd]),
                (p("k_norm"), vec![hd]),
                (p("wo"), vec![h, h]),
                (p("ffn_norm"), vec![h]),
                (p("w_gate"), vec![h, f]),
                (p("w_up"), vec![h, f]),
                (p("w_down"), vec![f, h]),
            ]);
        }
        out.push(("final_norm".to_string(), vec![h]));
        if !self.weight_tying {
            out.push(("unembed".to_string(), vec![v, h]));
        }
        out
    }
}

/// Named parameter list; see [`ModelConfig::layout`] for the order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

const PER_LAYER: usize = 11;

impl<T: Real> ModelParams<T> {
    /// Samples a fresh model. Embeddings are `N(0, 1/sqrt(H))`, matrices
    /// Xavier-normal with `std = sqrt(2 / (fan_in + fan_out))`, gains one.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let std = if name == "embed" || name == "unembed" {
                1.0 / (config.hidden_dim as f64).sqrt()
            } else if shape.len() == 2 {
                (2.0 / (shape[0] + shape[1]) as f64).sqrt()
            } else {
                0.0
            };
            let tensor = if shape.len() == 1 {
                Tensor::from_fn(shape, |_| T::one())
            } else {
                let normal = Normal::new(0.0, std).expect("std is finite and positive");
                Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
            };
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, e.g. a checkpoint.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(ModelError::Param(format!(
                "expected {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(layout) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(ModelError::Param(want));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Index of the tensor used as the output table.
    pub fn output_index(&self) -> usize {
        if self.config.weight_tying {
            0
        } else {
            self.tensors.len() - 1
        }
    }

    pub fn input_embedding(&self) -> &Tensor<T> {
        &self.tensors[0]
    }

    pub fn output_tensor(&self) -> &Tensor<T> {
        &self.tensors[self.output_index()]
    }

    /// Mutable output table; with tying this is also the input embedding.
    pub fn output_tensor_mut(&mut self) -> &mut Tensor<T> {
        let i = self.output_index();
        &mut self.tensors[i]
    }

    pub fn output_table(&self) -> Result<EmbeddingTable<T>, ModelError> {
        Ok(EmbeddingTable::new(
            self.output_tensor().clone(),
            self.config.weight_tying,
        )?)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records the forward pass over `batch` sequences of `seq` tokens
    /// (row-major in `tokens`). Parameters enter as leaves tracking
    /// gradients iff `track_grads`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        track_grads: bool,
    ) -> Result<Forward, ModelError> {
        let cfg = &self.config;
        if seq > cfg.seq_len {
            return Err(ModelError::Sequence {
                len: seq,
                max: cfg.seq_len,
            });
        }
        if tokens.len() != batch * seq {
            return Err(ModelError::Config(format!(
                "{} tokens do not form {batch} x {seq}",
                tokens.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Token {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let params: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if track_grads {
                    g.input(&t.clone().with_grad())
                } else {
                    g.input(t)
                }
            })
            .collect();
        let (n, h, heads, hd) = (batch * seq, cfg.hidden_dim, cfg.n_heads, cfg.head_dim());
        let positions: Vec<usize> = (0..n)
            .flat_map(|r| std::iter::repeat_n(r % seq, heads))
            .collect();

        let mut x = g.gather(params[0], tokens)?;
        for l in 0..cfg.n_layers {
            let p = &params[1 + l * PER_LAYER..1 + (l + 1) * PER_LAYER];
            let [attn_norm, wq, wk, wv, q_norm, k_norm, wo, ffn_norm, w_gate, w_up, w_down] =
                p.try_into().expect("layer slice has PER_LAYER entries");

            let xn = g.layer_norm(x, attn_norm)?;
            // qk-layernorm per head, then rotation.
            let mut project = |w: Var, gain: Var| -> Result<Var, NnError> {
                let proj = g.matmul(xn, w)?;
                let per_head = g.reshape(proj, vec![n * heads, hd])?;
                let normed = g.layer_norm(per_head, gain)?;
                let rotated = g.rope(normed, &positions, ROPE_BASE)?;
                g.reshape(rotated, vec![n, h])
            };
            let q = project(wq, q_norm)?;
            let k = project(wk, k_norm)?;
            let v = g.matmul(xn, wv)?;
            let att = g.causal_attention(q, k, v, batch, seq, heads)?;
            let o = g.matmul(att, wo)?;
            x = g.add(x, o)?;

            let xn = g.layer_norm(x, ffn_norm)?;
            let gate = g.matmul(xn, w_gate)?;
            let up = g.matmul(xn, w_up)?;
            let act = g.swiglu(gate, up)?;
            let down = g.matmul(act, w_down)?;
            x = g.add(x, down)?;
        }
        let final_norm = params[1 + cfg.n_layers * PER_LAYER];
        let hidden = g.layer_norm(x, final_norm)?;
        let table = params[self.output_index()];
        Ok(Forward {
            params,
            hidden,
            table,
        })
    }

    /// Pre-strategy logits `[batch * seq, V]` without gradient tracking.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, tokens, batch, seq, false)?;
        let l = g.matmul_nt(f.hidden, f.table)?;
        Ok(g.tensor(l))
    }
}

/// Graph handles produced by [`ModelParams::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// One leaf per parameter tensor, in layout order.
    pub params: Vec<Var>,
    /// Final-LayerNorm hidden states `[batch * seq, H]`.
    pub hidden: Var,
    /// The output table leaf (the input embedding when tied).
    pub table: Var,
}

/// Rotates consecutive pairs of `x` by `position * theta_j`,
/// `theta_j = base^(-2j / dim)`.
pub fn apply_rope<T: Real>(x: &[T], position: f64, base: f64) -> Result<Vec<T>, ModelError> {
    let dim = x.len();
    if !dim.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "rotary dim must be even, got {dim}"
        )));
    }
    let mut out = x.to_vec();
    for j in 0..dim / 2 {
        let angle = position * rope_frequency(j, dim, base);
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[2 * j].as_f64(), x[2 * j + 1].as_f64());
        out[2 * j] = T::of(a * c - b * s);
        out[2 * j + 1] = T::of(a * s + b * c);
    }
    Ok(out)
}

/// Elementwise `b * silu(a)`.
pub fn swiglu<T: Real>(a: &[T], b: &[T]) -> Result<Vec<T>, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::Config(format!(
            "swiglu operands differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a
        .iter()
        .zip(b)
        .map(|(&a, &b)| b * a / (T::one() + (-a).exp()))
        .collect())
}

//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use logitlab::head::{head_loss_graph, HeadStrategy};
use logitlab::model::{ModelConfig, ModelParams};
use logitlab::nn::gradcheck::{max_relative_error, numeric_gradient, FD_STEP};
use logitlab::nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Head-loss gradient error w.r.t. table and hidden states (V=7, H=5, N=4).
pub fn head_error(strategy: HeadStrategy, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, h, n) = (7, 5, 4);
    let table = random(&mut rng, &[v, h], 1.0);
    let hidden = random(&mut rng, &[n, h], 2.0);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
    let point: Vec<f64> = table.values().iter().chain(hidden.values()).copied().collect();
    let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let t = g.input(&Tensor::new(vec![v, h], flat[..v * h].to_vec()).unwrap().with_grad());
        let x = g.input(&Tensor::new(vec![n, h], flat[v * h..].to_vec()).unwrap().with_grad());
        let loss = head_loss_graph(&mut g, t, x, &targets, &strategy).unwrap();
        let value = g.scalar(loss.total);
        if !want_grad {
            return (value, Vec::new());
        }
        g.backward(loss.total).unwrap();
        let mut grad = g.grad(t).unwrap().to_vec();
        grad.extend_from_slice(g.grad(x).unwrap());
        (value, grad)
    };
    let (_, analytic) = eval(&point, true);
    let numeric = numeric_gradient(|p| eval(p, false).0, &point, FD_STEP);
    max_relative_error(&analytic, &numeric)
}

/// Full-model gradient error for a 2-layer, H=8, V=11 model.
pub fn model_error(tying: bool, strategy: HeadStrategy) -> f64 {
    let cfg = ModelConfig {
        vocab_size: 11,
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        seq_len: 5,
        weight_tying: tying,
        seed: 21,
    };
    let params = ModelParams::<f64>::init(&cfg).unwrap();
    let (batch, seq) = (2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..11)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..11)).collect();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let names = params.names().to_vec();
    let rebuild = |flat: &[f64]| {
        let mut off = 0;
        let named = names
            .iter()
            .zip(&shapes)
            .map(|(n, s)| {
                let len: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + len].to_vec()).unwrap();
                off += len;
                (n.clone(), t)
            })
            .collect();
        ModelParams::from_named(&cfg, named).unwrap()
    };
    let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let p = rebuild(flat);
        let mut g = Graph::new();
        let f = p.forward(&mut g, &tokens, batch, seq, want_grad).unwrap();
        let loss = head_loss_graph(&mut g, f.table, f.hidden, &targets, &strategy).unwrap();
        let value = g.scalar(loss.total);
        if !want_grad {
            return (value, Vec::new());
        }
        g.backward(loss.total).unwrap();
        let grad = f
            .params
            .iter()
            .flat_map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect();
        (value, grad)
    };
    let point: Vec<f64> = params.tensors().iter().flat_map(|t| t.values().to_vec()).collect();
    let (_, analytic) = eval(&point, true);
    let numeric = numeric_gradient(|p| eval(p, false).0, &point, FD_STEP);
    max_relative_error(&analytic, &numeric)
}

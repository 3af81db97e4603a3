//! Independent reference computations shared by the integration tests.
//! Nothing here calls the engine's forward or backward code.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dropcompact::linalg::{Matrix, Rng};
use dropcompact::network::{backward, Activation, Layer, MaskSet, MlpParams};
use dropcompact::retention::{retention_gradient, PriorHyper, RetentionParams, RetentionUpdateConfig};

pub fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        Activation::Linear => z,
    }
}

/// Scalar-loop forward pass: `h(l) = act(W h(l-1) + b) * scale(l)`.
/// `scale[l]` multiplies the outputs of maskable layer `l` (0 = input).
/// Returns the logits.
pub fn scalar_logits(params: &MlpParams, x: &[f64], scale: &[Vec<f64>]) -> Vec<f64> {
    let mut h: Vec<f64> = x.iter().zip(&scale[0]).map(|(a, s)| a * s).collect();
    let depth = params.depth();
    for (l, layer) in params.layers().iter().enumerate() {
        let mut next = Vec::with_capacity(layer.outputs());
        for r in 0..layer.outputs() {
            let mut z = layer.bias[r];
            for c in 0..layer.inputs() {
                z += layer.weights.get(r, c) * h[c];
            }
            let mut a = act(layer.activation, z);
            if l + 1 < depth {
                a *= scale[l + 1][r];
            }
            next.push(a);
        }
        h = next;
    }
    h
}

/// Cross-entropy by the textbook formula, `-ln(e^{z_k} / Σ e^{z_j})`.
/// Only valid for moderate logits.
pub fn naive_xent(logits: &[f64], k: usize) -> f64 {
    let denom: f64 = logits.iter().map(|z| z.exp()).sum();
    -(logits[k].exp() / denom).ln()
}

pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn random_net(dims: &[usize], hidden: Activation, rng: &mut Rng) -> MlpParams {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let data = (0..w[0] * w[1]).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            Layer {
                weights: Matrix::from_vec(w[1], w[0], data).unwrap(),
                bias: (0..w[1]).map(|_| rng.uniform_in(-0.5, 0.5)).collect(),
                activation: if i + 2 == dims.len() { Activation::Linear } else { hidden },
            }
        })
        .collect();
    MlpParams::new(layers).unwrap()
}

fn mask_scale(masks: &MaskSet) -> Vec<Vec<f64>> {
    masks
        .masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn with_param(params: &MlpParams, layer: usize, idx: Option<(usize, usize)>, unit: usize, delta: f64) -> MlpParams {
    let mut layers = params.clone().into_layers();
    match idx {
        Some((r, c)) => {
            let v = layers[layer].weights.get(r, c);
            layers[layer].weights.set(r, c, v + delta);
        }
        None => layers[layer].bias[unit] += delta,
    }
    MlpParams::new(layers).unwrap()
}

/// Smallest |pre-activation| of any ReLU unit, by the scalar oracle.
fn min_relu_margin(params: &MlpParams, x: &[f64], scale: &[Vec<f64>]) -> f64 {
    let mut h: Vec<f64> = x.iter().zip(&scale[0]).map(|(a, s)| a * s).collect();
    let mut margin = f64::INFINITY;
    let depth = params.depth();
    for (l, layer) in params.layers().iter().enumerate() {
        let mut next = Vec::new();
        for r in 0..layer.outputs() {
            let mut z = layer.bias[r];
            for c in 0..layer.inputs() {
                z += layer.weights.get(r, c) * h[c];
            }
            if layer.activation == Activation::Relu {
                margin = margin.min(z.abs());
            }
            let mut a = act(layer.activation, z);
            if l + 1 < depth {
                a *= scale[l + 1][r];
            }
            next.push(a);
        }
        h = next;
    }
    margin
}

pub struct GradCheck {
    pub nets: usize,
    pub params_checked: usize,
    /// Parameters that failed both the relative and the absolute bound.
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// Compares `backward` against central differences of the scalar oracle's
/// loss on `nets` random networks up to (6, 8, 5, 4), half ReLU, half
/// sigmoid, under random masks.
pub fn gradient_check(nets: usize, seed: u64) -> GradCheck {
    const H: f64 = 1e-6;
    let mut rng = Rng::new(seed);
    let mut out = GradCheck {
        nets,
        params_checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    for n in 0..nets {
        let dims = [1 + rng.below(6), 1 + rng.below(8), 1 + rng.below(5), 2 + rng.below(3)];
        let act = if n % 2 == 0 { Activation::Relu } else { Activation::Sigmoid };
        let params = random_net(&dims, act, &mut rng);
        let k = rng.below(dims[3]);
        // Redraw until no ReLU sits within a few steps of its kink.
        let (x, masks) = loop {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let masks = MaskSet {
                masks: dims[..3].iter().map(|&d| (0..d).map(|_| rng.uniform() < 0.7).collect()).collect(),
            };
            if min_relu_margin(&params, &x, &mask_scale(&masks)) > 1e-4 {
                break (x, masks);
            }
        };
        let scale = mask_scale(&masks);
        let (_, grads) = backward(&params, &x, k, &masks).unwrap();
        let loss_at = |p: &MlpParams| naive_xent(&scalar_logits(p, &x, &scale), k);
        for (l, layer) in params.layers().iter().enumerate() {
            let mut check = |name: String, analytic: f64, idx: Option<(usize, usize)>, unit: usize| {
                let plus = loss_at(&with_param(&params, l, idx, unit, H));
                let minus = loss_at(&with_param(&params, l, idx, unit, -H));
                let numeric = (plus - minus) / (2.0 * H);
                let abs = (analytic - numeric).abs();
                let rel = abs / analytic.abs().max(numeric.abs()).max(1e-300);
                out.params_checked += 1;
                if analytic.abs().max(numeric.abs()) > 1e-5 {
                    out.worst_rel = out.worst_rel.max(rel);
                }
                if rel > 1e-4 && abs > 1e-7 {
                    out.failures.push(format!(
                        "net {n} {dims:?} {}: {name} analytic {analytic:e} numeric {numeric:e}",
                        act.name()
                    ));
                }
            };
            for r in 0..layer.outputs() {
                for c in 0..layer.inputs() {
                    check(format!("W{}[{r},{c}]", l + 1), grads.weights[l].get(r, c), Some((r, c)), 0);
                }
                check(format!("b{}[{r}]", l + 1), grads.biases[l][r], None, r);
            }
        }
    }
    out
}

/// The fixed 2-3-2 network used by the estimator oracle.
pub fn estimator_fixture() -> (MlpParams, RetentionParams, Vec<f64>, usize) {
    let l1 = Layer {
        weights: Matrix::from_rows(&[vec![1.2, -0.7], vec![-0.4, 0.9], vec![0.8, 0.6]]).unwrap(),
        bias: vec![0.1, -0.2, 0.05],
        activation: Activation::Relu,
    };
    let l2 = Layer {
        weights: Matrix::from_rows(&[vec![0.7, -1.1, 0.5], vec![-0.6, 0.8, 1.3]]).unwrap(),
        bias: vec![0.0, 0.1],
        activation: Activation::Linear,
    };
    let params = MlpParams::new(vec![l1, l2]).unwrap();
    let pi = RetentionParams::new(vec![vec![0.8, 0.6], vec![0.5, 0.3, 0.7]]).unwrap();
    (params, pi, vec![1.0, -0.5], 1)
}

/// Exact mean and variance, per unit, of one example's data term
/// `(w̃(M) - C) · d/dπ log p(M|Π)` by enumerating every mask over the
/// maskable units. Uses the scalar oracle throughout.
pub fn enumerate_estimator(
    params: &MlpParams,
    pi: &RetentionParams,
    x: &[f64],
    k: usize,
    c: f64,
    clamp: f64,
) -> (Vec<f64>, Vec<f64>) {
    let probs: Vec<f64> = pi.layers().iter().flatten().copied().collect();
    let n = probs.len();
    let expected_p = naive_softmax(&scalar_logits(params, x, pi.layers()))[k];
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    for bits in 0u32..(1 << n) {
        let kept: Vec<bool> = (0..n).map(|u| bits >> u & 1 == 1).collect();
        let prob: f64 = kept
            .iter()
            .zip(&probs)
            .map(|(&b, &p)| if b { p } else { 1.0 - p })
            .product();
        let mut scale = Vec::new();
        let mut at = 0;
        for layer in pi.layers() {
            scale.push(kept[at..at + layer.len()].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
            at += layer.len();
        }
        let masked_p = naive_softmax(&scalar_logits(params, x, &scale))[k];
        let w = (masked_p / expected_p).min(clamp);
        for u in 0..n {
            let score = if kept[u] { 1.0 / probs[u] } else { -1.0 / (1.0 - probs[u]) };
            let v = (w - c) * score;
            mean[u] += prob * v;
            second[u] += prob * v * v;
        }
    }
    let var = mean.iter().zip(&second).map(|(m, s)| s - m * m).collect();
    (mean, var)
}

/// Monte Carlo mean, sample variance and standard error per unit of the
/// engine's `retention_gradient` on a one-example batch with `γ = 0`.
pub struct MonteCarlo {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub se: Vec<f64>,
}

pub fn monte_carlo_estimator(
    params: &MlpParams,
    pi: &RetentionParams,
    x: &[f64],
    k: usize,
    c: f64,
    draws: usize,
    seed: u64,
) -> MonteCarlo {
    let hyper = PriorHyper {
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.0,
    };
    let cfg = RetentionUpdateConfig {
        learning_rate: 0.0,
        control_variate: c,
        weight_clamp: 100.0,
    };
    let input = Matrix::from_vec(1, x.len(), x.to_vec()).unwrap();
    let mut rng = Rng::new(seed);
    let n: usize = pi.layers().iter().map(Vec::len).sum();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for _ in 0..draws {
        let g = retention_gradient(pi, params, &input, &[k], &hyper, &cfg, &mut rng).unwrap();
        for (u, v) in g.delta.iter().flatten().enumerate() {
            sum[u] += v;
            sq[u] += v * v;
        }
    }
    let d = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / d).collect();
    let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q - d * m * m) / (d - 1.0)).collect();
    let se = var.iter().map(|v| (v / d).sqrt()).collect();
    MonteCarlo { mean, var, se }
}

/// MNIST directory: `DROPCOMPACT_MNIST`, else `data/mnist` at the
/// workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = match std::env::var_os("DROPCOMPACT_MNIST") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    dropcompact::data::MnistFiles::locate(&dir).ok().map(|_| dir)
}

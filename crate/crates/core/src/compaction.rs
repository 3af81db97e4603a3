//! Structural surgery on trained networks: unit removal, folding retention
//! probabilities into weights, SVD bottlenecks, and weight accounting.
//!
//! Weight counts exclude biases throughout.

use crate::error::{Error, Result};
use crate::linalg::truncated_svd;
use crate::network::{Activation, Gradients, Layer, MlpParams};
use crate::retention::RetentionParams;

/// Number of weight-matrix entries (biases excluded).
pub fn count_weights(params: &MlpParams) -> usize {
    params
        .layers()
        .iter()
        .map(|l| l.weights.rows() * l.weights.cols())
        .sum()
}

/// Weight count of a plain perceptron with the given layer sizes.
pub fn count_weights_for_dims(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1]).sum()
}

/// Outcome of pruning one hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPrune {
    /// Maskable layer index (1 = first hidden layer).
    pub layer: usize,
    pub original: usize,
    /// Surviving old unit indices, ascending. New index `i` is old `kept[i]`.
    pub kept: Vec<usize>,
}

impl LayerPrune {
    pub fn removed(&self) -> usize {
        self.original - self.kept.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompactionReport {
    pub layers: Vec<LayerPrune>,
    pub weights_before: usize,
    pub weights_after: usize,
}

impl CompactionReport {
    pub fn compression_ratio(&self) -> f64 {
        self.weights_after as f64 / self.weights_before as f64
    }

    pub fn removed_total(&self) -> usize {
        self.layers.iter().map(LayerPrune::removed).sum()
    }

    pub fn is_noop(&self) -> bool {
        self.removed_total() == 0
    }

    /// Applies the same row/column removal to a gradient-shaped buffer (the
    /// momentum state).
    pub fn apply_to_gradients(&self, g: &Gradients) -> Gradients {
        let mut out = g.clone();
        for lp in &self.layers {
            let into = lp.layer - 1;
            out.weights[into] = out.weights[into].select_rows(&lp.kept);
            out.biases[into] = lp.kept.iter().map(|&u| out.biases[into][u]).collect();
            out.weights[lp.layer] = out.weights[lp.layer].select_cols(&lp.kept);
        }
        out
    }
}

/// Removes every hidden unit whose retention probability is below
/// `threshold`: its row and bias in the layer that produces it, its column in
/// the layer that consumes it, and its probability. The input layer is never
/// pruned.
pub fn prune_units(
    params: &MlpParams,
    pi: &RetentionParams,
    threshold: f64,
) -> Result<(MlpParams, RetentionParams, CompactionReport)> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!("prune threshold {threshold} outside [0, 1)")));
    }
    pi.check(params)?;
    let weights_before = count_weights(params);
    let mut layers = params.clone().into_layers();
    let mut probs = pi.clone().into_layers();
    let mut report = Vec::new();

    for l in 1..probs.len() {
        let original = probs[l].len();
        let kept: Vec<usize> = (0..original).filter(|&u| probs[l][u] >= threshold).collect();
        if kept.is_empty() {
            return Err(Error::Structural(format!(
                "pruning at threshold {threshold} would remove all {original} units of hidden layer {l}"
            )));
        }
        if kept.len() < original {
            layers[l - 1].weights = layers[l - 1].weights.select_rows(&kept);
            layers[l - 1].bias = kept.iter().map(|&u| layers[l - 1].bias[u]).collect();
            layers[l].weights = layers[l].weights.select_cols(&kept);
            probs[l] = kept.iter().map(|&u| probs[l][u]).collect();
        }
        report.push(LayerPrune {
            layer: l,
            original,
            kept,
        });
    }

    let params = MlpParams::new(layers)?;
    let weights_after = count_weights(&params);
    Ok((
        params,
        RetentionParams::new(probs)?,
        CompactionReport {
            layers: report,
            weights_before,
            weights_after,
        },
    ))
}

/// Folds the retention probabilities into the weights that consume each
/// layer, so the unscaled network computes the expectation-scaled one.
pub fn absorb_retention(params: &MlpParams, pi: &RetentionParams) -> Result<MlpParams> {
    pi.check(params)?;
    let mut out = params.clone();
    for (layer, p) in out.layers_mut().iter_mut().zip(pi.layers()) {
        if p.iter().any(|&v| v != 1.0) {
            layer.weights.scale_cols(p);
        }
    }
    Ok(out)
}

/// Final export: prune at `threshold`, then fold the remaining
/// probabilities into the weights. The result runs with all-ones retention.
pub fn export_compact(
    params: &MlpParams,
    pi: &RetentionParams,
    threshold: f64,
) -> Result<(MlpParams, RetentionParams, CompactionReport)> {
    let (pruned, pruned_pi, report) = prune_units(params, pi, threshold)?;
    let absorbed = absorb_retention(&pruned, &pruned_pi)?;
    let ones = RetentionParams::ones(&absorbed);
    Ok((absorbed, ones, report))
}

/// Default bottleneck ranks: `ceil(D / divisor)` for every hidden-to-hidden
/// matrix, `D` being its output width.
pub fn bottleneck_ranks(params: &MlpParams, divisor: usize) -> Result<Vec<usize>> {
    if divisor == 0 {
        return Err(Error::invalid("bottleneck divisor must be positive"));
    }
    Ok(hidden_to_hidden(params)
        .map(|l| {
            let layer = &params.layers()[l];
            layer
                .outputs()
                .div_ceil(divisor)
                .min(layer.outputs().min(layer.inputs()))
        })
        .collect())
}

fn hidden_to_hidden(params: &MlpParams) -> impl Iterator<Item = usize> {
    let depth = params.depth();
    1..depth.saturating_sub(1)
}

/// Replaces each hidden-to-hidden weight matrix `W` (`D_out x D_in`) with a
/// rank-`k` linear bottleneck: a `k x D_in` linear layer `sqrt(S) Vᵀ` with
/// zero bias, followed by `U sqrt(S)` (`D_out x k`) carrying the original
/// bias and activation. `ranks` lists one `k` per hidden-to-hidden matrix,
/// in order.
pub fn svd_compact(params: &MlpParams, ranks: &[usize]) -> Result<MlpParams> {
    let targets: Vec<usize> = hidden_to_hidden(params).collect();
    if ranks.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} ranks given for {} hidden-to-hidden matrices",
            ranks.len(),
            targets.len()
        )));
    }
    let mut layers = Vec::with_capacity(params.depth() + targets.len());
    for (l, layer) in params.layers().iter().enumerate() {
        let Some(pos) = targets.iter().position(|&t| t == l) else {
            layers.push(layer.clone());
            continue;
        };
        let k = ranks[pos];
        let svd = truncated_svd(&layer.weights, k)?;
        let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
        let mut first = svd.v.clone();
        first.scale_cols(&root);
        let mut second = svd.u.clone();
        second.scale_cols(&root);
        layers.push(Layer {
            weights: first.transpose(),
            bias: vec![0.0; k],
            activation: Activation::Linear,
        });
        layers.push(Layer {
            weights: second,
            bias: layer.bias.clone(),
            activation: layer.activation,
        });
    }
    MlpParams::new(layers)
}

/// Retention vector layout matching [`svd_compact`]'s output: the original
/// probabilities with an all-ones vector for each inserted bottleneck.
pub fn svd_retention(pi: &RetentionParams, ranks: &[usize]) -> Result<RetentionParams> {
    let mut layers = Vec::new();
    for (l, v) in pi.layers().iter().enumerate() {
        layers.push(v.clone());
        if l >= 1 && l <= ranks.len() {
            layers.push(vec![1.0; ranks[l - 1]]);
        }
    }
    RetentionParams::new(layers)
}

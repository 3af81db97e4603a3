//! Learned per-unit retention probabilities.
//!
//! Each maskable unit `u` of layer `l` keeps its activation with probability
//! `π[l][u]`. The probabilities follow a score-function (likelihood-ratio)
//! gradient of the dropout likelihood plus the derivative of a powered-beta
//! log-prior. The likelihood term uses the importance weight
//!
//! ```text
//! w = p(k | x, M) / p~(k | x, Π)
//! ```
//!
//! (masked pass over expectation-scaled pass) and a constant control variate
//! `C` subtracted from it, which leaves the expected update unchanged.
//!
//! Units whose probability sits within [`GUARD`] of 0 or 1 are *frozen*:
//! their value is snapped to exactly 0 or 1, their mask is deterministic and
//! they receive no further updates. The score `m/π - (1-m)/(1-π)` is
//! singular there.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::network::{forward_batch, forward_expected, forward_stochastic, MaskSet, MlpParams, UnitScale};

/// Width of the band next to 0 and 1 in which a unit counts as frozen.
pub const GUARD: f64 = 1e-6;

/// Probabilities entering the importance weight are floored here.
pub const PROB_FLOOR: f64 = 1e-30;

/// One probability vector per maskable layer (`0 .. L-1`).
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionParams {
    layers: Vec<Vec<f64>>,
}

impl RetentionParams {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        for (l, v) in layers.iter().enumerate() {
            if let Some(bad) = v.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::invalid(format!(
                    "retention probability {bad} in layer {l} outside [0, 1]"
                )));
            }
        }
        Ok(RetentionParams { layers })
    }

    pub fn ones(params: &MlpParams) -> Self {
        RetentionParams::uniform(params, 1.0, 1.0)
    }

    /// `input` on layer 0, `hidden` on every other maskable layer.
    pub fn uniform(params: &MlpParams, input: f64, hidden: f64) -> Self {
        let layers = params
            .maskable_dims()
            .into_iter()
            .enumerate()
            .map(|(l, d)| vec![if l == 0 { input } else { hidden }; d])
            .collect();
        RetentionParams { layers }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Vec<f64>> {
        self.layers
    }

    pub fn check(&self, params: &MlpParams) -> Result<()> {
        let dims = params.maskable_dims();
        if self.layers.len() != dims.len()
            || self.layers.iter().zip(&dims).any(|(v, &d)| v.len() != d)
        {
            return Err(Error::invalid(format!(
                "retention shapes {:?} do not match maskable layers {:?}",
                self.layers.iter().map(Vec::len).collect::<Vec<_>>(),
                dims
            )));
        }
        Ok(())
    }

    /// Probabilities of the hidden layers `1 .. L-1`, layer by layer.
    pub fn hidden_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().skip(1).flatten().copied()
    }

    pub fn is_binary(&self) -> bool {
        self.layers.iter().flatten().all(|&p| p == 0.0 || p == 1.0)
    }
}

#[inline]
pub fn is_frozen(p: f64) -> bool {
    p <= GUARD || p >= 1.0 - GUARD
}

/// Hyperparameters of the prior `p(π) ∝ (π^(α-1) (1-π)^(β-1))^γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorHyper {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PriorHyper {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "prior shape parameters must be positive, got alpha={alpha} beta={beta}"
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("prior exponent gamma={gamma} must be >= 0")));
        }
        Ok(PriorHyper { alpha, beta, gamma })
    }

    /// Unnormalized log-density. Test and documentation aid.
    pub fn log_density(&self, p: f64) -> f64 {
        self.gamma * ((self.alpha - 1.0) * p.ln() + (self.beta - 1.0) * (1.0 - p).ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetentionUpdateConfig {
    /// Step size applied to the accumulated direction.
    pub learning_rate: f64,
    /// Constant subtracted from the importance weight.
    pub control_variate: f64,
    /// Importance weights are clamped to `[0, weight_clamp]`.
    pub weight_clamp: f64,
}

impl Default for RetentionUpdateConfig {
    fn default() -> Self {
        RetentionUpdateConfig {
            learning_rate: 1e-4,
            control_variate: 1.0,
            weight_clamp: 100.0,
        }
    }
}

/// Draws `m[l][u] ~ Bernoulli(π[l][u])`, layer by layer, unit by unit.
pub fn sample_maskset(pi: &RetentionParams, rng: &mut Rng) -> MaskSet {
    MaskSet {
        masks: pi
            .layers
            .iter()
            .map(|v| v.iter().map(|&p| rng.bernoulli(p)).collect())
            .collect(),
    }
}

/// `n` mask sets as 0/1 matrices, one `n x D(l)` matrix per layer. Row `r`
/// equals the `r`-th of `n` successive [`sample_maskset`] calls.
pub fn sample_mask_batch(pi: &RetentionParams, n: usize, rng: &mut Rng) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = pi.layers.iter().map(|v| Matrix::zeros(n, v.len())).collect();
    for r in 0..n {
        for (m, v) in out.iter_mut().zip(&pi.layers) {
            for (x, &p) in m.row_mut(r).iter_mut().zip(v) {
                *x = if rng.bernoulli(p) { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

/// `d/dπ log p(M | Π)` per unit: `m/π - (1-m)/(1-π)`. Frozen units get 0.
pub fn mask_score(masks: &MaskSet, pi: &RetentionParams) -> Result<Vec<Vec<f64>>> {
    if masks.masks.len() != pi.layers.len()
        || masks.masks.iter().zip(&pi.layers).any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::invalid("mask and retention shapes differ"));
    }
    Ok(masks
        .masks
        .iter()
        .zip(&pi.layers)
        .map(|(m, p)| m.iter().zip(p).map(|(&b, &p)| unit_score(b, p)).collect())
        .collect())
}

#[inline]
fn unit_score(kept: bool, p: f64) -> f64 {
    if is_frozen(p) {
        0.0
    } else if kept {
        1.0 / p
    } else {
        -1.0 / (1.0 - p)
    }
}

/// `d/dπ log p(π)` of the unnormalized prior, `γ((α-1)/π - (β-1)/(1-π))`.
/// `None` for a frozen unit.
pub fn prior_score(p: f64, hyper: &PriorHyper) -> Option<f64> {
    if is_frozen(p) {
        return None;
    }
    Some(hyper.gamma * ((hyper.alpha - 1.0) / p - (hyper.beta - 1.0) / (1.0 - p)))
}

/// Importance weight of one example: label probability under `masks` over
/// the label probability of the expectation-scaled pass. Both probabilities
/// are floored at [`PROB_FLOOR`]; the ratio is not clamped here.
pub fn importance_weight(
    params: &MlpParams,
    pi: &RetentionParams,
    x: &[f64],
    k: usize,
    masks: &MaskSet,
) -> Result<f64> {
    pi.check(params)?;
    let masked = forward_stochastic(params, x, masks)?;
    let expected = forward_expected(params, x, pi)?;
    if k >= masked.probs.len() {
        return Err(Error::invalid(format!("label {k} out of range")));
    }
    Ok(masked.probs[k].max(PROB_FLOOR) / expected.probs[k].max(PROB_FLOOR))
}

/// Accumulated update direction of one retention step.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionGradient {
    pub delta: Vec<Vec<f64>>,
    pub clamped: usize,
    pub examples: usize,
}

/// The direction `δ` of a single retention update over one batch: the prior
/// derivative once per unit plus, for every example, one freshly drawn mask
/// set weighted by `(w - C)`. Frozen units stay at zero.
pub fn retention_gradient(
    pi: &RetentionParams,
    params: &MlpParams,
    inputs: &Matrix,
    labels: &[usize],
    hyper: &PriorHyper,
    cfg: &RetentionUpdateConfig,
    rng: &mut Rng,
) -> Result<RetentionGradient> {
    pi.check(params)?;
    let n = inputs.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid(format!(
            "retention update needs a non-empty batch with one label per row (got {n} rows, {} labels)",
            labels.len()
        )));
    }
    if let Some(&k) = labels.iter().find(|&&k| k >= params.num_classes()) {
        return Err(Error::invalid(format!("label {k} out of range")));
    }

    let mut delta: Vec<Vec<f64>> = pi
        .layers
        .iter()
        .map(|v| v.iter().map(|&p| prior_score(p, hyper).unwrap_or(0.0)).collect())
        .collect();

    let expected = forward_batch(params, inputs, UnitScale::Shared(&pi.layers))?;
    let masks = sample_mask_batch(pi, n, rng);
    let masked = forward_batch(params, inputs, UnitScale::PerExample(&masks))?;

    let mut clamped = 0;
    for (r, &k) in labels.iter().enumerate() {
        let ratio = masked.probs.get(r, k).max(PROB_FLOOR) / expected.probs.get(r, k).max(PROB_FLOOR);
        let w = if ratio > cfg.weight_clamp {
            clamped += 1;
            cfg.weight_clamp
        } else {
            ratio
        };
        let coef = w - cfg.control_variate;
        if coef == 0.0 {
            continue;
        }
        for ((d, m), p) in delta.iter_mut().zip(&masks).zip(&pi.layers) {
            for ((du, &mu), &pu) in d.iter_mut().zip(m.row(r)).zip(p) {
                *du += coef * unit_score(mu == 1.0, pu);
            }
        }
    }
    Ok(RetentionGradient {
        delta,
        clamped,
        examples: n,
    })
}

/// `Π <- Clip[Π + η δ]`, with frozen units left alone and units that land in
/// the guard band snapped to exactly 0 or 1.
pub fn apply_retention_step(pi: &RetentionParams, delta: &[Vec<f64>], learning_rate: f64) -> RetentionParams {
    let layers = pi
        .layers
        .iter()
        .zip(delta)
        .map(|(v, d)| {
            v.iter()
                .zip(d)
                .map(|(&p, &g)| {
                    if is_frozen(p) {
                        return p;
                    }
                    let next = (p + learning_rate * g).clamp(0.0, 1.0);
                    if next <= GUARD {
                        0.0
                    } else if next >= 1.0 - GUARD {
                        1.0
                    } else {
                        next
                    }
                })
                .collect()
        })
        .collect();
    RetentionParams { layers }
}

/// Summary of one [`retention_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub examples: usize,
    /// Importance weights clamped at the upper bound.
    pub clamped: usize,
}

/// One full retention update over a batch.
pub fn retention_update(
    pi: &RetentionParams,
    params: &MlpParams,
    inputs: &Matrix,
    labels: &[usize],
    hyper: &PriorHyper,
    cfg: &RetentionUpdateConfig,
    rng: &mut Rng,
) -> Result<(RetentionParams, UpdateStats)> {
    let grad = retention_gradient(pi, params, inputs, labels, hyper, cfg, rng)?;
    let next = apply_retention_step(pi, &grad.delta, cfg.learning_rate);
    Ok((
        next,
        UpdateStats {
            examples: grad.examples,
            clamped: grad.clamped,
        },
    ))
}

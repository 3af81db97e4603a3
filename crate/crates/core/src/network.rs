//! Multilayer perceptron with per-unit scaling of every layer's output.
//!
//! The same recursion serves training and prediction:
//!
//! ```text
//! h0 = s0 ⊙ x
//! hl = sl ⊙ a(Wl h(l-1) + bl)      l = 1 .. L-1
//! logits = WL h(L-1) + bL
//! ```
//!
//! With `s` a sampled binary mask this is a dropout network; with `s = π`
//! (the retention probabilities) it is the deterministic expectation-scaled
//! network used for prediction. Masks are not rescaled during training. The
//! logits are never masked.

use crate::error::{Error, Result};
use crate::linalg::{gemm, glorot_uniform, Matrix, Rng, Trans};
use crate::retention::RetentionParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Identity. Used for the logits and for SVD bottleneck layers.
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `D(l) x D(l-1)`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Weights and biases of an `L`-layer perceptron. Layer `L` produces logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::invalid(format!(
                    "layer {}: bias length {} != {} outputs",
                    i + 1,
                    layer.bias.len(),
                    layer.outputs()
                )));
            }
            if layer.outputs() == 0 || layer.inputs() == 0 {
                return Err(Error::Structural(format!("layer {} has no units", i + 1)));
            }
            if i > 0 && layers[i - 1].outputs() != layer.inputs() {
                return Err(Error::invalid(format!(
                    "layer {} expects {} inputs but layer {} has {} outputs",
                    i + 1,
                    layer.inputs(),
                    i,
                    layers[i - 1].outputs()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Linear {
            return Err(Error::invalid("the output layer must be linear (logits)"));
        }
        Ok(MlpParams { layers })
    }

    /// Glorot-uniform weights and zero biases for `dims = [D0, .., DL]`.
    pub fn glorot(dims: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("layer_dims needs an input and an output size"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(Layer {
                    weights: glorot_uniform(w[0], w[1], rng)?,
                    bias: vec![0.0; w[1]],
                    activation: if i + 2 == dims.len() {
                        Activation::Linear
                    } else {
                        hidden
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Number of weight layers, `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[D0, D1, .., DL]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    /// Sizes of the maskable layers `0 .. L-1`.
    pub fn maskable_dims(&self) -> Vec<usize> {
        let mut d = self.layer_dims();
        d.pop();
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }
}

/// One binary mask per maskable layer (`0 .. L-1`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn ones(params: &MlpParams) -> Self {
        MaskSet {
            masks: params.maskable_dims().into_iter().map(|d| vec![true; d]).collect(),
        }
    }

    pub fn check(&self, params: &MlpParams) -> Result<()> {
        let dims = params.maskable_dims();
        if self.masks.len() != dims.len()
            || self.masks.iter().zip(&dims).any(|(m, &d)| m.len() != d)
        {
            return Err(Error::invalid(format!(
                "mask shapes {:?} do not match maskable layers {:?}",
                self.masks.iter().map(Vec::len).collect::<Vec<_>>(),
                dims
            )));
        }
        Ok(())
    }

    fn as_scale_rows(&self) -> Vec<Matrix> {
        self.masks
            .iter()
            .map(|m| {
                let row = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                Matrix::from_vec(1, m.len(), row).expect("finite")
            })
            .collect()
    }
}

/// Per-layer output scaling used by the batched passes.
#[derive(Clone, Copy, Debug)]
pub enum UnitScale<'a> {
    /// No scaling (all masks one).
    Ones,
    /// One vector per maskable layer shared by every example (`π`).
    Shared(&'a [Vec<f64>]),
    /// One `N x D(l)` matrix per maskable layer (sampled masks).
    PerExample(&'a [Matrix]),
}

impl UnitScale<'_> {
    fn check(&self, params: &MlpParams, n: usize) -> Result<()> {
        let dims = params.maskable_dims();
        match self {
            UnitScale::Ones => Ok(()),
            UnitScale::Shared(v) => {
                if v.len() != dims.len() || v.iter().zip(&dims).any(|(p, &d)| p.len() != d) {
                    return Err(Error::invalid(format!(
                        "retention shapes {:?} do not match maskable layers {:?}",
                        v.iter().map(Vec::len).collect::<Vec<_>>(),
                        dims
                    )));
                }
                Ok(())
            }
            UnitScale::PerExample(m) => {
                if m.len() != dims.len() || m.iter().zip(&dims).any(|(s, &d)| s.shape() != (n, d))
                {
                    return Err(Error::invalid("per-example mask shapes do not match the batch"));
                }
                Ok(())
            }
        }
    }

    fn apply(&self, layer: usize, h: &mut Matrix) {
        match self {
            UnitScale::Ones => {}
            UnitScale::Shared(v) => h.scale_cols(&v[layer]),
            UnitScale::PerExample(m) => {
                for (x, s) in h.data_mut().iter_mut().zip(m[layer].data()) {
                    *x *= s;
                }
            }
        }
    }

    fn factor(&self, layer: usize, row: usize, unit: usize) -> f64 {
        match self {
            UnitScale::Ones => 1.0,
            UnitScale::Shared(v) => v[layer][unit],
            UnitScale::PerExample(m) => m[layer].get(row, unit),
        }
    }
}

/// Intermediate values of a batched pass, one row per example.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    /// `h(0) .. h(L-1)`, after scaling.
    pub activations: Vec<Matrix>,
    /// `z(1) .. z(L)`; the last entry holds the logits.
    pub pre_activations: Vec<Matrix>,
    pub probs: Matrix,
}

impl BatchTrace {
    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cross-entropy of each example against its label.
    pub fn losses(&self, labels: &[usize]) -> Vec<f64> {
        let logits = self.logits();
        labels
            .iter()
            .enumerate()
            .map(|(r, &k)| xent_from_logits(logits.row(r), k))
            .collect()
    }

    fn row(&self, r: usize) -> ForwardTrace {
        ForwardTrace {
            pre_activations: self.pre_activations.iter().map(|m| m.row(r).to_vec()).collect(),
            activations: self.activations.iter().map(|m| m.row(r).to_vec()).collect(),
            probs: self.probs.row(r).to_vec(),
        }
    }
}

/// Intermediate values of a single-example pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `z(1) .. z(L)`.
    pub pre_activations: Vec<Vec<f64>>,
    /// `h(0) .. h(L-1)`.
    pub activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().unwrap()
    }
}

/// Batched forward pass. `inputs` is `N x D0`.
pub fn forward_batch(params: &MlpParams, inputs: &Matrix, scale: UnitScale) -> Result<BatchTrace> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "input width {} != network input {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    let n = inputs.rows();
    scale.check(params, n)?;

    let depth = params.depth();
    let mut activations = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut h = inputs.clone();
    scale.apply(0, &mut h);
    for (l, layer) in params.layers().iter().enumerate() {
        let mut z = Matrix::zeros(n, layer.outputs());
        for r in 0..n {
            z.row_mut(r).copy_from_slice(&layer.bias);
        }
        gemm(1.0, &h, Trans::No, &layer.weights, Trans::Yes, 1.0, &mut z);
        activations.push(h);
        if l + 1 < depth {
            let mut next = z.clone();
            next.data_mut()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            scale.apply(l + 1, &mut next);
            h = next;
            pre_activations.push(z);
        } else {
            pre_activations.push(z);
            break;
        }
    }

    let logits = pre_activations.last().unwrap();
    let mut probs = Matrix::zeros(n, logits.cols());
    for r in 0..n {
        softmax_into(logits.row(r), probs.row_mut(r));
    }
    Ok(BatchTrace {
        activations,
        pre_activations,
        probs,
    })
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn backward_batch(
    params: &MlpParams,
    trace: &BatchTrace,
    labels: &[usize],
    scale: UnitScale,
) -> Result<(f64, Gradients)> {
    let n = trace.len();
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    check_labels(labels, params.num_classes())?;
    let inv_n = 1.0 / n as f64;
    let loss = trace.losses(labels).iter().sum::<f64>() * inv_n;

    let depth = params.depth();
    let mut grads = Gradients::zeros_like(params);

    // dL/dz for the logits: (softmax - onehot) / N.
    let mut delta = trace.probs.clone();
    for (r, &k) in labels.iter().enumerate() {
        let row = delta.row_mut(r);
        row[k] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }

    for l in (0..depth).rev() {
        let layer = &params.layers()[l];
        let h_prev = &trace.activations[l];
        gemm(1.0, &delta, Trans::Yes, h_prev, Trans::No, 0.0, &mut grads.weights[l]);
        for r in 0..n {
            for (g, d) in grads.biases[l].iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        if l == 0 {
            break;
        }
        // dL/dh(l-1), then through the scaling and the activation of layer l-1.
        let mut dh = Matrix::zeros(n, layer.inputs());
        gemm(1.0, &delta, Trans::No, &layer.weights, Trans::No, 0.0, &mut dh);
        let below = &params.layers()[l - 1];
        let z = &trace.pre_activations[l - 1];
        for r in 0..n {
            let zr = z.row(r);
            for (u, g) in dh.row_mut(r).iter_mut().enumerate() {
                let s = scale.factor(l, r, u);
                *g *= if s == 0.0 {
                    0.0
                } else {
                    let a = below.activation.apply(zr[u]);
                    s * below.activation.derivative(zr[u], a)
                };
            }
        }
        delta = dh;
    }
    Ok((loss, grads))
}

/// Dropout forward pass for one example under `masks`.
pub fn forward_stochastic(params: &MlpParams, x: &[f64], masks: &MaskSet) -> Result<ForwardTrace> {
    masks.check(params)?;
    let scale = masks.as_scale_rows();
    let input = single_row(x)?;
    Ok(forward_batch(params, &input, UnitScale::PerExample(&scale))?.row(0))
}

/// Expectation-scaled forward pass for one example.
pub fn forward_expected(params: &MlpParams, x: &[f64], pi: &RetentionParams) -> Result<ForwardTrace> {
    let input = single_row(x)?;
    Ok(forward_batch(params, &input, UnitScale::Shared(pi.layers()))?.row(0))
}

/// Unscaled forward pass.
pub fn forward_plain(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    let input = single_row(x)?;
    Ok(forward_batch(params, &input, UnitScale::Ones)?.row(0))
}

/// `-log p(k | ·)` from a trace.
pub fn xent_loss(trace: &ForwardTrace, k: usize) -> Result<f64> {
    check_labels(&[k], trace.probs.len())?;
    Ok(xent_from_logits(trace.logits(), k))
}

/// Loss and exact gradients for one example under `masks`.
pub fn backward(params: &MlpParams, x: &[f64], k: usize, masks: &MaskSet) -> Result<(f64, Gradients)> {
    masks.check(params)?;
    let scale_rows = masks.as_scale_rows();
    let scale = UnitScale::PerExample(&scale_rows);
    let input = single_row(x)?;
    let trace = forward_batch(params, &input, scale)?;
    backward_batch(params, &trace, &[k], scale)
}

fn single_row(x: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, x.len(), x.to_vec())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&k| k >= classes) {
        Some(k) => Err(Error::invalid(format!("label {k} outside 0..{classes}"))),
        None => Ok(()),
    }
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn xent_from_logits(logits: &[f64], k: usize) -> f64 {
    log_sum_exp(logits) - logits[k]
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Per-layer gradients mirroring [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            weights: params
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.outputs(), l.inputs()))
                .collect(),
            biases: params.layers().iter().map(|l| vec![0.0; l.outputs()]).collect(),
        }
    }

    pub fn conforms(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.depth()
            && self.biases.len() == params.depth()
            && params.layers().iter().enumerate().all(|(i, l)| {
                self.weights[i].shape() == l.weights.shape() && self.biases[i].len() == l.bias.len()
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(dims: &[usize], act: Activation, seed: u64) -> MlpParams {
        let mut rng = Rng::new(seed);
        let mut p = MlpParams::glorot(dims, act, &mut rng).unwrap();
        for l in p.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.uniform_in(-0.5, 0.5));
        }
        p
    }

    #[test]
    fn hand_relu_mask() {
        let layers = vec![
            Layer {
                weights: Matrix::identity(2),
                bias: vec![0.0; 2],
                activation: Activation::Relu,
            },
            Layer {
                weights: Matrix::identity(2),
                bias: vec![0.0; 2],
                activation: Activation::Linear,
            },
        ];
        let p = MlpParams::new(layers).unwrap();
        let masks = MaskSet {
            masks: vec![vec![true, true], vec![true, false]],
        };
        let t = forward_stochastic(&p, &[2.0, -3.0], &masks).unwrap();
        assert_eq!(t.activations[1], vec![2.0, 0.0]);
    }

    #[test]
    fn ones_masks_equal_plain_and_unit_pi() {
        let p = net(&[4, 5, 3], Activation::Sigmoid, 1);
        let x = [0.1, -0.2, 0.3, 0.9];
        let a = forward_stochastic(&p, &x, &MaskSet::ones(&p)).unwrap();
        let b = forward_plain(&p, &x).unwrap();
        let c = forward_expected(&p, &x, &RetentionParams::ones(&p)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_input_retention_leaves_bias() {
        let p = net(&[3, 4, 2], Activation::Relu, 2);
        let mut pi = RetentionParams::ones(&p);
        pi.layers_mut()[0].iter_mut().for_each(|v| *v = 0.0);
        let t = forward_expected(&p, &[1.0, 2.0, 3.0], &pi).unwrap();
        assert_eq!(t.pre_activations[0], p.layers()[0].bias);
    }

    #[test]
    fn xent_uniform_and_extreme() {
        let t = ForwardTrace {
            pre_activations: vec![vec![0.0; 10]],
            activations: vec![],
            probs: vec![0.1; 10],
        };
        assert!((xent_loss(&t, 3).unwrap() - 10f64.ln()).abs() < 1e-15);
        let mut logits = vec![0.0; 10];
        logits[4] = 1000.0;
        let t = ForwardTrace {
            pre_activations: vec![logits],
            activations: vec![],
            probs: vec![0.0; 10],
        };
        let l = xent_loss(&t, 4).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(xent_loss(&t, 10).is_err());
    }

    #[test]
    fn softmax_normalized_for_large_logits() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..10).map(|_| rng.uniform_in(-1e3, 1e3)).collect();
            let mut out = vec![0.0; 10];
            softmax_into(&logits, &mut out);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn output_bias_gradient_is_softmax_minus_onehot() {
        let p = net(&[4, 5, 3], Activation::Relu, 5);
        let x = [0.5, -1.0, 0.25, 2.0];
        let (_, g) = backward(&p, &x, 2, &MaskSet::ones(&p)).unwrap();
        let t = forward_plain(&p, &x).unwrap();
        for (j, &prob) in t.probs.iter().enumerate() {
            let expect = prob - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.biases[1][j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_unit_has_zero_incoming_gradient() {
        let p = net(&[4, 5, 3], Activation::Sigmoid, 6);
        let mut masks = MaskSet::ones(&p);
        masks.masks[1][3] = false;
        let (_, g) = backward(&p, &[0.1, 0.2, 0.3, 0.4], 0, &masks).unwrap();
        assert!(g.weights[0].row(3).iter().all(|&v| v == 0.0));
        assert_eq!(g.biases[0][3], 0.0);
        // and its outgoing weights see a zero activation
        assert!(g.weights[1].column(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = net(&[4, 5, 3], Activation::Relu, 7);
        assert!(forward_plain(&p, &[1.0; 3]).is_err());
        let bad = MaskSet {
            masks: vec![vec![true; 4]],
        };
        assert!(forward_stochastic(&p, &[1.0; 4], &bad).is_err());
        assert!(backward(&p, &[1.0; 4], 3, &MaskSet::ones(&p)).is_err());
    }

    #[test]
    fn params_validation() {
        let mut rng = Rng::new(1);
        assert!(MlpParams::glorot(&[3], Activation::Relu, &mut rng).is_err());
        let layers = vec![Layer {
            weights: Matrix::zeros(2, 3),
            bias: vec![0.0; 2],
            activation: Activation::Relu,
        }];
        assert!(MlpParams::new(layers).is_err());
        let p = MlpParams::glorot(&[784, 50, 50, 10], Activation::Relu, &mut rng).unwrap();
        assert_eq!(p.layer_dims(), vec![784, 50, 50, 10]);
        assert_eq!(p.maskable_dims(), vec![784, 50, 50]);
        assert_eq!(p.num_classes(), 10);
    }
}

//! Weight optimization under dropout masks, the four training regimes, and
//! the alternating weight/retention loop used for compaction.

use crate::compaction::{count_weights, export_compact, prune_units};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::network::{backward_batch, forward_batch, Activation, Gradients, MlpParams, UnitScale};
use crate::retention::{
    retention_update, sample_mask_batch, PriorHyper, RetentionParams, RetentionUpdateConfig,
};

pub const HISTOGRAM_BINS: usize = 20;
/// A retention probability this close to 0 or 1 counts as converged.
pub const CONVERGED_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// No masks.
    Plain,
    /// Fixed hidden retention probability.
    Dropout,
    /// Hidden retention ramps linearly to 1.
    Annealed,
    /// Per-unit retention learned under the bimodal prior; units are removed.
    Compaction,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Plain => "plain",
            Regime::Dropout => "dropout",
            Regime::Annealed => "annealed",
            Regime::Compaction => "compaction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(Regime::Plain),
            "dropout" => Some(Regime::Dropout),
            "annealed" => Some(Regime::Annealed),
            "compaction" => Some(Regime::Compaction),
            _ => None,
        }
    }

    /// Weight decay used for this regime on MNIST.
    pub fn default_l2(self) -> f64 {
        match self {
            Regime::Plain => 0.0,
            Regime::Dropout | Regime::Annealed => 1e-6,
            Regime::Compaction => 1e-4,
        }
    }
}

/// How per-example gradients of a minibatch are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Reduction::Mean),
            "sum" => Some(Reduction::Sum),
            _ => None,
        }
    }
}

/// Where the retention sweep draws its batches from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetentionSource {
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub reduction: Reduction,
    pub samples_per_example: usize,
    /// Initial (and, for `Dropout`, fixed) hidden retention probability.
    pub hidden_retention: f64,
    pub input_retention: f64,
    pub annealing_epochs: usize,
    pub prior: PriorHyper,
    pub retention: RetentionUpdateConfig,
    pub retention_source: RetentionSource,
    /// Units below this retention are removed after every sweep.
    pub prune_threshold: f64,
    /// Threshold of the final export (prune, then fold `π` into weights).
    pub export_threshold: f64,
    pub plateau_halving: bool,
    pub plateau_threshold: f64,
    /// Epochs without a dev improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// MNIST settings for `regime`. `train_size` sets the prior exponent.
    pub fn mnist(regime: Regime, hidden: Vec<usize>, train_size: usize) -> Self {
        TrainConfig {
            regime,
            hidden,
            activation: Activation::Relu,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.001,
            momentum: 0.9,
            l2: regime.default_l2(),
            reduction: Reduction::Sum,
            samples_per_example: 1,
            hidden_retention: if regime == Regime::Plain { 1.0 } else { 0.5 },
            input_retention: 1.0,
            annealing_epochs: 4,
            prior: PriorHyper {
                alpha: 0.9,
                beta: 0.9,
                gamma: train_size as f64,
            },
            retention: RetentionUpdateConfig {
                learning_rate: 1e-7,
                ..RetentionUpdateConfig::default()
            },
            retention_source: RetentionSource::Train,
            prune_threshold: 0.05,
            export_threshold: 0.5,
            plateau_halving: false,
            plateau_threshold: 0.005,
            patience: 8,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.samples_per_example == 0 {
            return bad("samples_per_example must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        for (name, p) in [
            ("hidden_retention", self.hidden_retention),
            ("input_retention", self.input_retention),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.prune_threshold) || !(0.0..1.0).contains(&self.export_threshold) {
            return bad("prune thresholds must be in [0, 1)".into());
        }
        if !(self.retention.learning_rate >= 0.0) || !(self.retention.weight_clamp > 0.0) {
            return bad("retention learning rate must be >= 0 and the weight clamp > 0".into());
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad("plateau_threshold must be >= 0".into());
        }
        PriorHyper::new(self.prior.alpha, self.prior.beta, self.prior.gamma)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// One step of SGD with momentum:
/// `v <- μ v - η (g + λ W)`, `W <- W + v`. Biases get no weight decay.
pub fn sgd_step(
    params: &mut MlpParams,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
    l2: f64,
) -> Result<()> {
    if !grads.conforms(params) || !velocity.conforms(params) {
        return Err(Error::invalid("gradient or velocity shape does not match the network"));
    }
    for (l, layer) in params.layers_mut().iter_mut().enumerate() {
        let v = velocity.weights[l].data_mut();
        let g = grads.weights[l].data();
        for ((w, v), g) in layer.weights.data_mut().iter_mut().zip(v).zip(g) {
            *v = momentum * *v - lr * (g + l2 * *w);
            *w += *v;
        }
        for ((b, v), g) in layer.bias.iter_mut().zip(&mut velocity.biases[l]).zip(&grads.biases[l]) {
            *v = momentum * *v - lr * g;
            *b += *v;
        }
    }
    Ok(())
}

/// Hidden retention of the annealed regime for training epoch `epoch`
/// (0-based): `0.5 + 0.5 min(epoch / annealing_epochs, 1)`.
pub fn anneal_retention(epoch: usize, annealing_epochs: usize) -> f64 {
    if annealing_epochs == 0 {
        return 1.0;
    }
    0.5 + 0.5 * (epoch as f64 / annealing_epochs as f64).min(1.0)
}

/// Learning-rate halving on a dev plateau.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Plateau {
    pub threshold: f64,
    pub halvings: usize,
}

impl Plateau {
    pub fn new(threshold: f64) -> Self {
        Plateau {
            threshold,
            halvings: 0,
        }
    }

    /// Halves `lr` unless `current` improves on `previous` by at least
    /// `threshold` relative to `previous`.
    pub fn update(&mut self, previous: f64, current: f64, lr: f64) -> f64 {
        let improvement = if previous > 0.0 {
            (previous - current) / previous
        } else {
            0.0
        };
        if improvement < self.threshold {
            self.halvings += 1;
            lr * 0.5
        } else {
            lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Percentage of argmax mismatches.
    pub error: f64,
    pub loss: f64,
    pub examples: usize,
}

const EVAL_CHUNK: usize = 1000;

/// Error rate and mean cross-entropy of the expectation-scaled network on
/// the rows `idx`.
pub fn evaluate_indices(
    params: &MlpParams,
    pi: &RetentionParams,
    data: &Dataset,
    idx: &[usize],
) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    pi.check(params)?;
    let mut wrong = 0usize;
    let mut loss = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(chunk);
        let trace = forward_batch(params, &x, UnitScale::Shared(pi.layers()))?;
        for (r, &k) in labels.iter().enumerate() {
            if argmax(trace.probs.row(r)) != k {
                wrong += 1;
            }
        }
        loss += trace.losses(&labels).iter().sum::<f64>();
    }
    Ok(Evaluation {
        error: 100.0 * wrong as f64 / idx.len() as f64,
        loss: loss / idx.len() as f64,
        examples: idx.len(),
    })
}

pub fn evaluate(
    params: &MlpParams,
    pi: &RetentionParams,
    data: &Dataset,
    split: Split,
) -> Result<Evaluation> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name())));
    }
    evaluate_indices(params, pi, data, &idx)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One shuffled pass over `idx`: a fresh mask set per example (and per
/// extra sample), averaged backward gradients, one [`sgd_step`] per
/// minibatch. Returns the mean minibatch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_weights_epoch(
    params: &mut MlpParams,
    velocity: &mut Gradients,
    pi: Option<&RetentionParams>,
    data: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut order = idx.to_vec();
    let mut shuffle_rng = rng.split(0);
    let mut mask_rng = rng.split(1);
    shuffle_rng.shuffle(&mut order);
    let s = cfg.samples_per_example;
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let rows: Vec<usize> = if s == 1 {
            chunk.to_vec()
        } else {
            chunk.iter().flat_map(|&i| std::iter::repeat_n(i, s)).collect()
        };
        let (x, labels) = data.gather(&rows);
        let masks;
        let scale = match pi {
            None => UnitScale::Ones,
            Some(pi) => {
                masks = sample_mask_batch(pi, rows.len(), &mut mask_rng);
                UnitScale::PerExample(&masks)
            }
        };
        let trace = forward_batch(params, &x, scale)?;
        let (loss, mut grads) = backward_batch(params, &trace, &labels, scale)?;
        // Summing also sums the per-example weight decay.
        let l2 = match cfg.reduction {
            Reduction::Mean => cfg.l2,
            Reduction::Sum => {
                let f = chunk.len() as f64;
                scale_gradients(&mut grads, f);
                cfg.l2 * f
            }
        };
        sgd_step(params, &grads, velocity, lr, cfg.momentum, l2)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn scale_gradients(g: &mut Gradients, f: f64) {
    for m in &mut g.weights {
        m.data_mut().iter_mut().for_each(|v| *v *= f);
    }
    for b in &mut g.biases {
        b.iter_mut().for_each(|v| *v *= f);
    }
}

/// One retention update per random batch of `idx`.
pub fn retention_sweep(
    params: &MlpParams,
    pi: &RetentionParams,
    data: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(RetentionParams, usize)> {
    let mut order = idx.to_vec();
    rng.split(0).shuffle(&mut order);
    let mut mask_rng = rng.split(1);
    let mut pi = pi.clone();
    let mut clamped = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = data.gather(chunk);
        let (next, stats) =
            retention_update(&pi, params, &x, &labels, &cfg.prior, &cfg.retention, &mut mask_rng)?;
        pi = next;
        clamped += stats.clamped;
    }
    Ok((pi, clamped))
}

/// Counts of hidden retention values in 20 equal bins over `[0, 1]` (the
/// last bin closed). `removed` units are counted in the first bin.
pub fn retention_histogram(pi: &RetentionParams, removed: usize) -> [usize; HISTOGRAM_BINS] {
    let mut h = [0usize; HISTOGRAM_BINS];
    h[0] += removed;
    for p in pi.hidden_values() {
        let b = ((p * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1;
    }
    h
}

/// Fraction of hidden units within [`CONVERGED_TOL`] of 0 or 1; removed
/// units count as converged at 0.
pub fn converged_fraction(pi: &RetentionParams, removed: usize) -> f64 {
    let mut total = removed;
    let mut done = removed;
    for p in pi.hidden_values() {
        total += 1;
        if p.min(1.0 - p) <= CONVERGED_TOL {
            done += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        done as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub dev: Option<Evaluation>,
    pub test: Option<Evaluation>,
    /// Hidden widths of the evaluated network.
    pub units: Vec<usize>,
    pub n_weights: usize,
    /// Hidden widths still being trained (before the export threshold).
    pub train_units: Vec<usize>,
    pub histogram: [usize; HISTOGRAM_BINS],
    pub converged: f64,
    pub clamped: usize,
}

/// Mutable training state; enough to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed training epochs.
    pub epoch: usize,
    pub params: MlpParams,
    pub pi: RetentionParams,
    pub velocity: Gradients,
    pub learning_rate: f64,
    pub halvings: usize,
    /// Hidden units removed so far.
    pub removed: usize,
}

impl TrainState {
    pub fn fresh(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let mut dims = vec![data.dim()];
        dims.extend(&cfg.hidden);
        dims.push(data.num_classes());
        let mut init = Rng::new(cfg.seed).split(u64::MAX);
        let params = MlpParams::glorot(&dims, cfg.activation, &mut init)?;
        let hidden = match cfg.regime {
            Regime::Plain => 1.0,
            Regime::Annealed => anneal_retention(0, cfg.annealing_epochs),
            Regime::Dropout | Regime::Compaction => cfg.hidden_retention,
        };
        let input = if cfg.regime == Regime::Plain { 1.0 } else { cfg.input_retention };
        let pi = RetentionParams::uniform(&params, input, hidden);
        Ok(Self::from_model(params, pi, cfg))
    }

    /// Starts from an existing model (resume, fine-tuning).
    pub fn from_model(params: MlpParams, pi: RetentionParams, cfg: &TrainConfig) -> Self {
        let velocity = Gradients::zeros_like(&params);
        TrainState {
            epoch: 0,
            params,
            pi,
            velocity,
            learning_rate: cfg.learning_rate,
            halvings: 0,
            removed: 0,
        }
    }
}

impl TrainState {
    /// Resets the retention probabilities to what `cfg.regime` trains with.
    /// Compaction keeps the learned values.
    pub fn for_regime(mut self, cfg: &TrainConfig) -> Self {
        let hidden = match cfg.regime {
            Regime::Plain => Some(1.0),
            Regime::Dropout => Some(cfg.hidden_retention),
            Regime::Annealed => Some(anneal_retention(self.epoch, cfg.annealing_epochs)),
            Regime::Compaction => None,
        };
        if let Some(h) = hidden {
            let input = if cfg.regime == Regime::Plain { 1.0 } else { cfg.input_retention };
            self.pi = RetentionParams::uniform(&self.params, input, h);
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-dev model as evaluated (exported for compaction).
    pub best_params: MlpParams,
    pub best_pi: RetentionParams,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    /// State after the last epoch, for resuming.
    pub last: TrainState,
}

/// Network used for evaluation: compaction runs are exported (pruned at the
/// export threshold with `π` folded in); other regimes use `π` as is.
fn evaluated_model(
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RetentionParams)> {
    if cfg.regime == Regime::Compaction {
        let (p, pi, _) = export_compact(&state.params, &state.pi, cfg.export_threshold)?;
        Ok((p, pi))
    } else {
        Ok((state.params.clone(), state.pi.clone()))
    }
}

fn hidden_widths(params: &MlpParams) -> Vec<usize> {
    let dims = params.layer_dims();
    dims[1..dims.len() - 1].to_vec()
}

fn better(a: &Evaluation, b: &Evaluation) -> bool {
    a.error < b.error || (a.error == b.error && a.loss < b.loss)
}

/// Alternating training: per epoch one weight pass, then (compaction only) a
/// retention sweep followed by unit removal. Stops after `cfg.epochs`
/// epochs or when the dev error has not improved for `cfg.patience`
/// epochs, and returns the best-dev model.
pub fn run_training(
    data: &Dataset,
    cfg: &TrainConfig,
    init: Option<TrainState>,
    observer: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    let dev_idx = data.indices(Split::Dev);
    let test_idx = data.indices(Split::Test);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training examples".into()));
    }
    if cfg.regime == Regime::Compaction && dev_idx.is_empty() {
        return Err(Error::Config("compaction regime needs a non-empty dev split".into()));
    }
    let retention_idx = match cfg.retention_source {
        RetentionSource::Train => &train_idx,
        RetentionSource::Dev => &dev_idx,
    };
    if retention_idx.is_empty() && cfg.regime == Regime::Compaction {
        return Err(Error::Config("retention source split is empty".into()));
    }

    let mut state = match init {
        Some(s) => s,
        None => TrainState::fresh(data, cfg)?,
    };
    state.pi.check(&state.params)?;
    if state.params.input_dim() != data.dim() || state.params.num_classes() != data.num_classes() {
        return Err(Error::Config(format!(
            "model shape {:?} does not fit data with {} inputs and {} classes",
            state.params.layer_dims(),
            data.dim(),
            data.num_classes()
        )));
    }
    let population = state.pi.hidden_values().count() + state.removed;
    let master = Rng::new(cfg.seed);
    let mut plateau = Plateau {
        threshold: cfg.plateau_threshold,
        halvings: state.halvings,
    };

    let report = |state: &TrainState, train_loss: f64, clamped: usize| -> Result<(EpochReport, MlpParams, RetentionParams)> {
        let (p, pi) = evaluated_model(state, cfg)?;
        let dev = if dev_idx.is_empty() { None } else { Some(evaluate_indices(&p, &pi, data, &dev_idx)?) };
        let test = if test_idx.is_empty() { None } else { Some(evaluate_indices(&p, &pi, data, &test_idx)?) };
        let removed = population - state.pi.hidden_values().count();
        Ok((
            EpochReport {
                epoch: state.epoch,
                learning_rate: state.learning_rate,
                train_loss,
                dev,
                test,
                units: hidden_widths(&p),
                n_weights: count_weights(&p),
                train_units: hidden_widths(&state.params),
                histogram: retention_histogram(&state.pi, removed),
                converged: converged_fraction(&state.pi, removed),
                clamped,
            },
            p,
            pi,
        ))
    };

    let initial_train = evaluate_indices(&state.params, &state.pi, data, &train_idx)?.loss;
    let (first, mut best_params, mut best_pi) = report(&state, initial_train, 0)?;
    observer(&first);
    let mut best_eval = first.dev;
    let mut best_epoch = state.epoch;
    let mut since_best = 0usize;
    let mut reports = vec![first];
    let stop_epoch = state.epoch + cfg.epochs;

    while state.epoch < stop_epoch {
        let e = state.epoch;
        let stream = master.split(e as u64 + 1);
        if cfg.regime == Regime::Annealed {
            let p = anneal_retention(e, cfg.annealing_epochs);
            state.pi = RetentionParams::uniform(&state.params, cfg.input_retention, p);
        }
        let pi = (cfg.regime != Regime::Plain).then_some(&state.pi);
        let train_loss = train_weights_epoch(
            &mut state.params,
            &mut state.velocity,
            pi,
            data,
            &train_idx,
            cfg,
            state.learning_rate,
            &mut stream.split(0),
        )?;
        let mut clamped = 0;
        if cfg.regime == Regime::Compaction {
            let (next, c) =
                retention_sweep(&state.params, &state.pi, data, retention_idx, cfg, &mut stream.split(1))?;
            clamped = c;
            let (p, pi, rep) = prune_units(&state.params, &next, cfg.prune_threshold)?;
            if !rep.is_noop() {
                state.velocity = rep.apply_to_gradients(&state.velocity);
                state.removed += rep.removed_total();
            }
            state.params = p;
            state.pi = pi;
        }
        state.epoch += 1;

        let (rep, p, pi) = report(&state, train_loss, clamped)?;
        observer(&rep);
        match (rep.dev, best_eval) {
            (Some(cur), Some(best)) if !better(&cur, &best) => since_best += 1,
            _ => {
                best_eval = rep.dev;
                best_params = p;
                best_pi = pi;
                best_epoch = state.epoch;
                since_best = 0;
            }
        }
        if cfg.plateau_halving {
            if let (Some(prev), Some(cur)) = (reports.last().and_then(|r| r.dev), rep.dev) {
                state.learning_rate = plateau.update(prev.error, cur.error, state.learning_rate);
                state.halvings = plateau.halvings;
            }
        }
        reports.push(rep);
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_pi,
        best_epoch,
        reports,
        last: state,
    })
}

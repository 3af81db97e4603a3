//! Flat `key = value` run configuration. Unknown keys are errors.
//!
//! ```text
//! # comment
//! regime = compaction
//! hidden = 100,100
//! epochs = 40
//! gamma = auto        # number of training examples
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::Activation;
use crate::trainer::{Reduction, Regime, RetentionSource, TrainConfig};

/// Everything a `train` run needs besides data paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub train: TrainConfig,
    /// `gamma` follows the training-set size.
    pub auto_gamma: bool,
    pub dev_size: usize,
    pub data_seed: u64,
}

pub const KEYS: &[&str] = &[
    "activation",
    "alpha",
    "annealing_epochs",
    "batch_size",
    "beta",
    "control_variate",
    "data_seed",
    "dev_size",
    "epochs",
    "export_threshold",
    "gamma",
    "hidden",
    "hidden_retention",
    "input_retention",
    "l2",
    "learning_rate",
    "momentum",
    "patience",
    "plateau_halving",
    "plateau_threshold",
    "prune_threshold",
    "reduction",
    "regime",
    "retention_learning_rate",
    "retention_source",
    "run_id",
    "samples_per_example",
    "seed",
    "weight_clamp",
];

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("config key '{key}': {msg}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(key, format!("cannot parse '{v}'")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(key, format!("expected on/off, got '{v}'"))),
    }
}

/// Splits config text into a key map, rejecting unknown and repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected 'key = value', got '{line}'", no + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown config key '{k}'", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: config key '{k}' repeated", no + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    /// Parses `text`; `regime` and `seed` override the file when given.
    /// Unset keys take the MNIST defaults of the chosen regime.
    pub fn parse(text: &str, regime: Option<Regime>, seed: Option<u64>) -> Result<Self> {
        let map = parse_pairs(text)?;
        let regime = match (regime, map.get("regime")) {
            (Some(r), _) => r,
            (None, Some(v)) => Regime::parse(v).ok_or_else(|| cfg_err("regime", format!("unknown regime '{v}'")))?,
            (None, None) => Regime::Plain,
        };
        let mut cfg = RunConfig {
            run_id: "run".into(),
            train: TrainConfig::mnist(regime, vec![50, 50], 50_000),
            auto_gamma: true,
            dev_size: 10_000,
            data_seed: 1,
        };
        for (k, v) in &map {
            let t = &mut cfg.train;
            let v = v.as_str();
            match k.as_str() {
                "regime" => {}
                "run_id" => {
                    if v.is_empty() || v.contains([',', '\n', '"']) {
                        return Err(cfg_err(k, "must be non-empty without commas or quotes"));
                    }
                    cfg.run_id = v.to_string();
                }
                "hidden" => {
                    t.hidden = v
                        .split(',')
                        .map(|p| num::<usize>(k, p.trim()))
                        .collect::<Result<_>>()?;
                }
                "activation" => {
                    t.activation = Activation::parse(v).ok_or_else(|| cfg_err(k, format!("unknown activation '{v}'")))?
                }
                "epochs" => t.epochs = num(k, v)?,
                "batch_size" => t.batch_size = num(k, v)?,
                "learning_rate" => t.learning_rate = num(k, v)?,
                "momentum" => t.momentum = num(k, v)?,
                "l2" => t.l2 = num(k, v)?,
                "reduction" => {
                    t.reduction = Reduction::parse(v).ok_or_else(|| cfg_err(k, format!("expected mean or sum, got '{v}'")))?
                }
                "samples_per_example" => t.samples_per_example = num(k, v)?,
                "hidden_retention" => t.hidden_retention = num(k, v)?,
                "input_retention" => t.input_retention = num(k, v)?,
                "annealing_epochs" => t.annealing_epochs = num(k, v)?,
                "alpha" => t.prior.alpha = num(k, v)?,
                "beta" => t.prior.beta = num(k, v)?,
                "gamma" => {
                    if v == "auto" {
                        cfg.auto_gamma = true;
                    } else {
                        cfg.auto_gamma = false;
                        t.prior.gamma = num(k, v)?;
                    }
                }
                "retention_learning_rate" => t.retention.learning_rate = num(k, v)?,
                "control_variate" => t.retention.control_variate = num(k, v)?,
                "weight_clamp" => t.retention.weight_clamp = num(k, v)?,
                "retention_source" => {
                    t.retention_source = match v {
                        "train" => RetentionSource::Train,
                        "dev" => RetentionSource::Dev,
                        _ => return Err(cfg_err(k, format!("expected train or dev, got '{v}'"))),
                    }
                }
                "prune_threshold" => t.prune_threshold = num(k, v)?,
                "export_threshold" => t.export_threshold = num(k, v)?,
                "plateau_halving" => t.plateau_halving = flag(k, v)?,
                "plateau_threshold" => t.plateau_threshold = num(k, v)?,
                "patience" => t.patience = num(k, v)?,
                "seed" => t.seed = num(k, v)?,
                "dev_size" => cfg.dev_size = num(k, v)?,
                "data_seed" => cfg.data_seed = num(k, v)?,
                _ => unreachable!("key list checked in parse_pairs"),
            }
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Sets `gamma` from the training-set size when it is automatic.
    pub fn resolve(&mut self, train_size: usize) {
        if self.auto_gamma {
            self.train.prior.gamma = train_size as f64;
        }
    }

    /// Canonical text: every key, sorted. Parsing it gives back `self`.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let hidden = t.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let gamma = if self.auto_gamma { "auto".to_string() } else { fmt_f(t.prior.gamma) };
        let pairs: [(&str, String); 29] = [
            ("activation", t.activation.name().into()),
            ("alpha", fmt_f(t.prior.alpha)),
            ("annealing_epochs", t.annealing_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("beta", fmt_f(t.prior.beta)),
            ("control_variate", fmt_f(t.retention.control_variate)),
            ("data_seed", self.data_seed.to_string()),
            ("dev_size", self.dev_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("export_threshold", fmt_f(t.export_threshold)),
            ("gamma", gamma),
            ("hidden", hidden),
            ("hidden_retention", fmt_f(t.hidden_retention)),
            ("input_retention", fmt_f(t.input_retention)),
            ("l2", fmt_f(t.l2)),
            ("learning_rate", fmt_f(t.learning_rate)),
            ("momentum", fmt_f(t.momentum)),
            ("patience", t.patience.to_string()),
            ("plateau_halving", if t.plateau_halving { "on" } else { "off" }.into()),
            ("plateau_threshold", fmt_f(t.plateau_threshold)),
            ("prune_threshold", fmt_f(t.prune_threshold)),
            ("reduction", t.reduction.name().into()),
            ("regime", t.regime.name().into()),
            ("retention_learning_rate", fmt_f(t.retention.learning_rate)),
            (
                "retention_source",
                match t.retention_source {
                    RetentionSource::Train => "train",
                    RetentionSource::Dev => "dev",
                }
                .into(),
            ),
            ("run_id", self.run_id.clone()),
            ("samples_per_example", t.samples_per_example.to_string()),
            ("seed", t.seed.to_string()),
            ("weight_clamp", fmt_f(t.retention.weight_clamp)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

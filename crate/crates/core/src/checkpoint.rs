//! Versioned binary checkpoints and their text rendering.
//!
//! Layout (little-endian): magic `DCKP`, `u32` version, then length-prefixed
//! sections in a fixed order. Every float is stored as its raw `f64` bits, so
//! loading and saving again reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{Activation, Gradients, Layer, MlpParams};
use crate::retention::RetentionParams;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;

/// Hidden widths after a pruning step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub epoch: u64,
    pub units: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical run configuration text.
    pub config: String,
    pub state: TrainState,
    pub best_epoch: u64,
    /// `NaN` when no dev split was used.
    pub best_dev_error: f64,
    pub best_dev_loss: f64,
    pub history: Vec<HistoryEntry>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        m.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u32(what)?;
        self.take(n.saturating_mul(8), what)?
            .chunks_exact(8)
            .map(|c| Ok(f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))))
            .collect()
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
    fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let rows = self.u32(what)?;
        let cols = self.u32(what)?;
        let raw = self.take(rows.saturating_mul(cols).saturating_mul(8), what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Linear => 2,
    }
}

fn activation_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Sigmoid),
        2 => Ok(Activation::Linear),
        _ => Err(Error::Checkpoint(format!("unknown activation code {code}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.str(&self.config);
        let s = &self.state;
        w.u64(s.epoch as u64);
        w.f64(s.learning_rate);
        w.u64(s.halvings as u64);
        w.u64(s.removed as u64);
        w.u64(self.best_epoch);
        w.f64(self.best_dev_error);
        w.f64(self.best_dev_loss);
        w.u32(s.params.depth());
        for layer in s.params.layers() {
            w.u8(activation_code(layer.activation));
            w.matrix(&layer.weights);
            w.f64s(&layer.bias);
        }
        w.u32(s.pi.layers().len());
        for p in s.pi.layers() {
            w.f64s(p);
        }
        for (m, b) in s.velocity.weights.iter().zip(&s.velocity.biases) {
            w.matrix(m);
            w.f64s(b);
        }
        w.u32(self.history.len());
        for h in &self.history {
            w.u64(h.epoch);
            w.u32(h.units.len());
            h.units.iter().for_each(|&u| w.u32(u as usize));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (magic mismatch)".into()));
        }
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {version} is not supported (expected {VERSION})"
            )));
        }
        let config = r.str("config")?;
        let epoch = r.u64("epoch")? as usize;
        let learning_rate = r.f64("learning rate")?;
        let halvings = r.u64("halvings")? as usize;
        let removed = r.u64("removed")? as usize;
        let best_epoch = r.u64("best epoch")?;
        let best_dev_error = r.f64("best dev error")?;
        let best_dev_loss = r.f64("best dev loss")?;
        let depth = r.u32("depth")?;
        let mut layers = Vec::with_capacity(depth.min(1024));
        for _ in 0..depth {
            let activation = activation_from(r.u8("activation")?)?;
            let weights = r.matrix("weights")?;
            let bias = r.f64s("bias")?;
            layers.push(Layer {
                weights,
                bias,
                activation,
            });
        }
        let params = MlpParams::new(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = r.u32("retention layers")?;
        let pi = (0..n).map(|_| r.f64s("retention")).collect::<Result<Vec<_>>>()?;
        let pi = RetentionParams::new(pi).map_err(|e| Error::Checkpoint(e.to_string()))?;
        pi.check(&params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut velocity = Gradients {
            weights: Vec::new(),
            biases: Vec::new(),
        };
        for _ in 0..depth {
            velocity.weights.push(r.matrix("velocity")?);
            velocity.biases.push(r.f64s("velocity bias")?);
        }
        if !velocity.conforms(&params) {
            return Err(Error::Checkpoint("velocity shape does not match the model".into()));
        }
        let count = r.u32("history")?;
        let mut history = Vec::new();
        for _ in 0..count {
            let epoch = r.u64("history epoch")?;
            let k = r.u32("history units")?;
            let units = (0..k).map(|_| r.u32("history units").map(|u| u as u32)).collect::<Result<_>>()?;
            history.push(HistoryEntry { epoch, units });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            state: TrainState {
                epoch,
                params,
                pi,
                velocity,
                learning_rate,
                halvings,
                removed,
            },
            best_epoch,
            best_dev_error,
            best_dev_loss,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Lossless text dump: floats are printed in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let s = &self.state;
        let mut out = String::new();
        let _ = writeln!(out, "version {VERSION}");
        let _ = writeln!(out, "epoch {}", s.epoch);
        let _ = writeln!(out, "learning_rate {:?}", s.learning_rate);
        let _ = writeln!(out, "best_epoch {} dev_error {:?} dev_loss {:?}", self.best_epoch, self.best_dev_error, self.best_dev_loss);
        let _ = writeln!(out, "dims {:?}", s.params.layer_dims());
        for (l, layer) in s.params.layers().iter().enumerate() {
            let _ = writeln!(out, "layer {} {} {}x{}", l + 1, layer.activation.name(), layer.weights.rows(), layer.weights.cols());
            for r in 0..layer.weights.rows() {
                let _ = writeln!(out, "w {}", join(layer.weights.row(r)));
            }
            let _ = writeln!(out, "b {}", join(&layer.bias));
        }
        for (l, p) in s.pi.layers().iter().enumerate() {
            let _ = writeln!(out, "pi {l} {}", join(p));
        }
        for h in &self.history {
            let _ = writeln!(out, "history {} {:?}", h.epoch, h.units);
        }
        out.push_str("config\n");
        out.push_str(&self.config);
        out
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

//! Forward-pass latency measurement and multiply-accumulate accounting.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::network::{Activation, MlpParams};

pub const MIN_REPS: usize = 30;
pub const WARMUP: usize = 10;

/// Multiply-accumulates per example of a dense pass: `Σ D(l) D(l-1)`.
pub fn flop_count(dims: &[usize]) -> Result<u64> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::invalid(format!("invalid shape {dims:?}")));
    }
    Ok(dims.windows(2).map(|w| w[0] as u64 * w[1] as u64).sum())
}

/// Parses `784-100-100-10` or `544,1536x4,2500` style shapes.
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let mut dims = Vec::new();
    for part in s.split([',', '-']).map(str::trim) {
        let (width, times) = match part.split_once(['x', '×']) {
            Some((w, t)) => (w, t),
            None => (part, "1"),
        };
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad shape component '{part}' in '{s}'")))
        };
        let (w, t) = (parse(width)?, parse(times)?);
        dims.extend(std::iter::repeat_n(w, t));
    }
    flop_count(&dims)?;
    Ok(dims)
}

/// Buffers for repeated dense forward passes over a fixed batch.
pub struct Workspace {
    params: MlpParams,
    input: Matrix,
    buffers: Vec<Matrix>,
}

impl Workspace {
    pub fn new(params: MlpParams, input: Matrix) -> Result<Self> {
        if input.cols() != params.input_dim() {
            return Err(Error::invalid("bench input width does not match the model"));
        }
        let n = input.rows();
        let buffers = params
            .layers()
            .iter()
            .map(|l| Matrix::zeros(n, l.outputs()))
            .collect();
        Ok(Workspace {
            params,
            input,
            buffers,
        })
    }

    /// Random-weight model of shape `dims` with a fixed random input batch.
    pub fn random(dims: &[usize], batch: usize, seed: u64) -> Result<Self> {
        flop_count(dims)?;
        if batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        let rng = Rng::new(seed);
        let params = MlpParams::glorot(dims, Activation::Relu, &mut rng.split(0))?;
        let mut data_rng = rng.split(1);
        let data = (0..batch * dims[0]).map(|_| data_rng.uniform()).collect();
        Self::new(params, Matrix::from_vec(batch, dims[0], data)?)
    }

    /// One pass; the softmax output lands in the last buffer. Allocation free.
    pub fn run(&mut self) {
        let depth = self.params.depth();
        for (l, layer) in self.params.layers().iter().enumerate() {
            let (done, rest) = self.buffers.split_at_mut(l);
            let out = &mut rest[0];
            let h = if l == 0 { &self.input } else { &done[l - 1] };
            dense(h, &layer.weights, &layer.bias, out);
            if l + 1 < depth {
                let act = layer.activation;
                out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            } else {
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
            }
        }
    }

    pub fn output(&self) -> &Matrix {
        self.buffers.last().unwrap()
    }
}

/// Weight rows per block; a block is reused across the whole batch while it
/// is still in cache.
const ROW_BLOCK: usize = 64;

/// `out = h Wᵀ + b` without touching the heap. `matrixmultiply` allocates
/// packing buffers on every call, which the timed loop must not do.
fn dense(h: &Matrix, w: &Matrix, bias: &[f64], out: &mut Matrix) {
    let rows = w.rows();
    let mut j0 = 0;
    while j0 < rows {
        let j1 = (j0 + ROW_BLOCK).min(rows);
        for r in 0..h.rows() {
            let x = h.row(r);
            let o = out.row_mut(r);
            for j in j0..j1 {
                o[j] = bias[j] + dot(x, w.row(j));
            }
        }
        j0 = j1;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4 * 4;
    for (x, y) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        s += x * y;
    }
    s
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub dims: Vec<usize>,
    pub batch: usize,
    pub reps: usize,
    pub flops: u64,
    /// Per-pass latency in seconds.
    pub min: f64,
    pub median: f64,
    pub p95: f64,
    /// Examples per second at the median latency.
    pub throughput: f64,
}

impl BenchResult {
    pub const CSV_HEADER: [&'static str; 9] = [
        "shape", "batch", "reps", "macs", "min_s", "median_s", "p95_s", "examples_per_s", "speedup",
    ];

    pub fn shape_string(&self) -> String {
        self.dims.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    }

    /// Median-latency ratio `reference / self`.
    pub fn speedup_over(&self, reference: &BenchResult) -> f64 {
        reference.median / self.median
    }

    pub fn csv_record(&self, speedup: Option<f64>) -> Vec<String> {
        vec![
            self.shape_string(),
            self.batch.to_string(),
            self.reps.to_string(),
            self.flops.to_string(),
            format!("{:.9}", self.min),
            format!("{:.9}", self.median),
            format!("{:.9}", self.p95),
            format!("{:.3}", self.throughput),
            speedup.map_or(String::new(), |s| format!("{s:.4}")),
        ]
    }
}

/// Sorted-sample statistics: minimum, median, and nearest-rank 95th percentile.
pub fn latency_stats(samples: &mut [f64]) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (samples[0], median, samples[rank - 1])
}

/// Times `reps` dense passes of a random model of shape `dims` after
/// [`WARMUP`] untimed passes.
pub fn time_forward(dims: &[usize], batch: usize, reps: usize, seed: u64) -> Result<BenchResult> {
    if reps < MIN_REPS {
        return Err(Error::invalid(format!("reps must be >= {MIN_REPS}, got {reps}")));
    }
    let mut ws = Workspace::random(dims, batch, seed)?;
    for _ in 0..WARMUP {
        ws.run();
    }
    let mut samples = vec![0.0; reps];
    for s in samples.iter_mut() {
        let t = Instant::now();
        ws.run();
        *s = t.elapsed().as_secs_f64();
    }
    std::hint::black_box(ws.output());
    let (min, median, p95) = latency_stats(&mut samples);
    Ok(BenchResult {
        dims: dims.to_vec(),
        batch,
        reps,
        flops: flop_count(dims)?,
        min,
        median,
        p95,
        throughput: batch as f64 / median,
    })
}

/// Aggregate examples per second with `workers` threads each running its own
/// copy of the model for `duration`.
pub fn parallel_throughput(
    dims: &[usize],
    batch: usize,
    workers: usize,
    duration: Duration,
    seed: u64,
) -> Result<f64> {
    if workers == 0 {
        return Err(Error::invalid("workers must be >= 1"));
    }
    let mut spaces = (0..workers)
        .map(|w| Workspace::random(dims, batch, seed.wrapping_add(w as u64)))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let passes: usize = std::thread::scope(|s| {
        let handles: Vec<_> = spaces
            .iter_mut()
            .map(|ws| {
                s.spawn(move || {
                    let mut n = 0;
                    while start.elapsed() < duration {
                        ws.run();
                        n += 1;
                    }
                    n
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    });
    Ok((passes * batch) as f64 / start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::forward_plain;

    #[test]
    fn flop_counts() {
        assert_eq!(flop_count(&[784, 50, 50, 10]).unwrap(), 42200);
        let full = flop_count(&[10, 10, 10, 10]).unwrap();
        let half = flop_count(&[10, 5, 10, 10]).unwrap();
        assert_eq!(full - half, 50 + 50);
        assert!(flop_count(&[5]).is_err());
        assert!(flop_count(&[5, 0, 3]).is_err());
    }

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("784-50-50-10").unwrap(), vec![784, 50, 50, 10]);
        assert_eq!(parse_shape("544,1536x4,2500").unwrap(), vec![544, 1536, 1536, 1536, 1536, 2500]);
        assert!(parse_shape("544,abc").is_err());
        assert!(parse_shape("7").is_err());
    }

    #[test]
    fn stats_order() {
        let mut s: Vec<f64> = (1..=40).rev().map(f64::from).collect();
        let (min, med, p95) = latency_stats(&mut s);
        assert_eq!((min, med, p95), (1.0, 20.5, 38.0));
    }

    #[test]
    fn workspace_matches_network_forward() {
        let mut ws = Workspace::random(&[6, 5, 4, 3], 3, 8).unwrap();
        ws.run();
        for r in 0..3 {
            let x = ws.input.row(r).to_vec();
            let t = forward_plain(&ws.params, &x).unwrap();
            for (a, b) in t.probs.iter().zip(ws.output().row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reps_floor() {
        assert!(time_forward(&[4, 3, 2], 1, 29, 0).is_err());
        let r = time_forward(&[4, 3, 2], 1, 30, 0).unwrap();
        assert!(r.min <= r.median && r.median <= r.p95);
        assert_eq!(r.flops, 18);
    }

    #[test]
    fn parallel_mode_runs() {
        let t = parallel_throughput(&[8, 8, 2], 4, 2, Duration::from_millis(20), 1).unwrap();
        assert!(t > 0.0);
    }
}

//! Metrics and histogram CSV files, and aggregation across runs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::EpochReport;

/// Fixed leading columns of a metrics file; `units_l1, units_l2, ...` follow.
pub const METRICS_PREFIX: [&str; 9] = [
    "run_id", "regime", "epoch", "train_loss", "dev_loss", "dev_err", "test_loss", "test_err", "n_weights",
];
pub const HISTOGRAM_HEADER: [&str; 4] = ["epoch", "bin_lo", "bin_hi", "count"];

pub fn metrics_header(hidden_layers: usize) -> Vec<String> {
    METRICS_PREFIX
        .iter()
        .map(|s| s.to_string())
        .chain((1..=hidden_layers).map(|l| format!("units_l{l}")))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub regime: String,
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when the split is absent.
    pub dev_loss: f64,
    pub dev_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
    pub n_weights: usize,
    pub units: Vec<usize>,
}

fn opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

impl MetricsRow {
    pub fn from_report(run_id: &str, regime: &str, r: &EpochReport) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            regime: regime.to_string(),
            epoch: r.epoch,
            train_loss: r.train_loss,
            dev_loss: r.dev.map_or(f64::NAN, |e| e.loss),
            dev_err: r.dev.map_or(f64::NAN, |e| e.error),
            test_loss: r.test.map_or(f64::NAN, |e| e.loss),
            test_err: r.test.map_or(f64::NAN, |e| e.error),
            n_weights: r.n_weights,
            units: r.units.clone(),
        }
    }

    pub fn record(&self) -> Vec<String> {
        let mut v = vec![
            self.run_id.clone(),
            self.regime.clone(),
            self.epoch.to_string(),
            opt(self.train_loss),
            opt(self.dev_loss),
            opt(self.dev_err),
            opt(self.test_loss),
            opt(self.test_err),
            self.n_weights.to_string(),
        ];
        v.extend(self.units.iter().map(usize::to_string));
        v
    }
}

/// Rows of the histogram file for one epoch: 20 equal bins over `[0, 1]`.
pub fn histogram_records(r: &EpochReport) -> Vec<Vec<String>> {
    let n = r.histogram.len();
    r.histogram
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            vec![
                r.epoch.to_string(),
                format!("{:?}", b as f64 / n as f64),
                format!("{:?}", (b + 1) as f64 / n as f64),
                c.to_string(),
            ]
        })
        .collect()
}

fn parse_err(path: &Path, field: &'static str, line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        field,
        offset: line,
        reason: reason.into(),
    }
}

/// Checks a metrics header: the fixed prefix, then `units_l1..units_lk`.
pub fn check_header(path: &Path, header: &[String]) -> Result<usize> {
    let bad = |why: String| parse_err(path, "header", 0, format!("inconsistent metrics header: {why}"));
    if header.len() < METRICS_PREFIX.len() {
        return Err(bad(format!("{} columns", header.len())));
    }
    for (got, want) in header.iter().zip(METRICS_PREFIX) {
        if got != want {
            return Err(bad(format!("expected column '{want}', found '{got}'")));
        }
    }
    for (i, h) in header[METRICS_PREFIX.len()..].iter().enumerate() {
        if *h != format!("units_l{}", i + 1) {
            return Err(bad(format!("unexpected column '{h}'")));
        }
    }
    Ok(header.len() - METRICS_PREFIX.len())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let width = check_header(path, &header)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        if rec.len() != header.len() {
            return Err(parse_err(path, "row", line, format!("{} fields, header has {}", rec.len(), header.len())));
        }
        let f = |c: usize, name: &'static str| -> Result<f64> {
            let s = &rec[c];
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse().map_err(|_| parse_err(path, name, line, format!("bad number '{s}'")))
        };
        let u = |c: usize, name: &'static str| -> Result<usize> {
            rec[c].parse().map_err(|_| parse_err(path, name, line, format!("bad count '{}'", &rec[c])))
        };
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            regime: rec[1].to_string(),
            epoch: u(2, "epoch")?,
            train_loss: f(3, "train_loss")?,
            dev_loss: f(4, "dev_loss")?,
            dev_err: f(5, "dev_err")?,
            test_loss: f(6, "test_loss")?,
            test_err: f(7, "test_err")?,
            n_weights: u(8, "n_weights")?,
            units: (0..width).map(|k| u(9 + k, "units")).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!()
    }
    parse_err(path, "csv", 0, e.to_string())
}

/// Mean and sample standard deviation (`n - 1`); a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// The row a run is scored by: lowest dev error, ties broken by dev loss
/// and then by the earlier epoch. Runs without dev metrics use their last
/// epoch.
pub fn selected_row(rows: &[&MetricsRow]) -> Option<usize> {
    if rows.is_empty() {
        return None;
    }
    if rows.iter().all(|r| r.dev_err.is_nan()) {
        return (0..rows.len()).max_by_key(|&i| rows[i].epoch);
    }
    (0..rows.len()).filter(|&i| !rows[i].dev_err.is_nan()).min_by(|&a, &b| {
        let (x, y) = (rows[a], rows[b]);
        x.dev_err
            .total_cmp(&y.dev_err)
            .then(x.dev_loss.total_cmp(&y.dev_loss))
            .then(x.epoch.cmp(&y.epoch))
    })
}

/// One selected row per run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPoint {
    pub regime: String,
    /// Hidden widths at the run's first recorded epoch, e.g. `100x100`.
    pub arch: String,
    pub row: MetricsRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub regime: String,
    pub arch: String,
    pub runs: usize,
    pub n_weights: (f64, f64),
    pub test_err: (f64, f64),
    pub test_loss: (f64, f64),
    pub dev_err: (f64, f64),
}

impl GroupSummary {
    pub const CSV_HEADER: [&'static str; 11] = [
        "regime",
        "arch",
        "runs",
        "n_weights_mean",
        "n_weights_std",
        "test_err_mean",
        "test_err_std",
        "test_loss_mean",
        "test_loss_std",
        "dev_err_mean",
        "dev_err_std",
    ];

    pub fn record(&self) -> Vec<String> {
        let mut v = vec![self.regime.clone(), self.arch.clone(), self.runs.to_string()];
        for (m, s) in [self.n_weights, self.test_err, self.test_loss, self.dev_err] {
            v.push(opt(m));
            v.push(opt(s));
        }
        v
    }
}

pub fn run_points(rows: &[MetricsRow]) -> Vec<RunPoint> {
    let mut runs: BTreeMap<(&str, &str), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        runs.entry((&r.regime, &r.run_id)).or_default().push(r);
    }
    runs.into_iter()
        .filter_map(|((regime, _), rs)| {
            let first = rs.iter().min_by_key(|r| r.epoch)?;
            let arch = first.units.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let pick = selected_row(&rs)?;
            Some(RunPoint {
                regime: regime.to_string(),
                arch,
                row: rs[pick].clone(),
            })
        })
        .collect()
}

/// Groups runs by regime and initial architecture.
pub fn summarize(points: &[RunPoint]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunPoint>> = BTreeMap::new();
    for p in points {
        groups.entry((&p.regime, &p.arch)).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|((regime, arch), ps)| {
            let col = |f: fn(&MetricsRow) -> f64| mean_std(&ps.iter().map(|p| f(&p.row)).collect::<Vec<_>>());
            GroupSummary {
                regime: regime.to_string(),
                arch: arch.to_string(),
                runs: ps.len(),
                n_weights: col(|r| r.n_weights as f64),
                test_err: col(|r| r.test_err),
                test_loss: col(|r| r.test_loss),
                dev_err: col(|r| r.dev_err),
            }
        })
        .collect()
}

/// Human-readable table in the usual "#weights, error, loss" layout.
pub fn render_table(groups: &[GroupSummary]) -> String {
    let mut out = format!(
        "{:<12} {:<12} {:>4} {:>10} {:>18} {:>20}\n",
        "regime", "arch", "runs", "#weights", "test err [%]", "test loss"
    );
    for g in groups {
        out.push_str(&format!(
            "{:<12} {:<12} {:>4} {:>10.1} {:>8.2} ± {:<7.3} {:>9.4} ± {:<8.4}\n",
            g.regime, g.arch, g.runs, g.n_weights.0, g.test_err.0, g.test_err.1, g.test_loss.0, g.test_loss.1
        ));
    }
    out
}

//! Command implementations behind the `dropcompact` binary. Each returns
//! an [`Error`] whose [`Error::exit_code`] is the process status.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::bench::{flop_count, parallel_throughput, parse_shape, time_forward, BenchResult};
use crate::checkpoint::{Checkpoint, HistoryEntry};
use crate::compaction::{absorb_retention, bottleneck_ranks, count_weights, export_compact, svd_compact, CompactionReport};
use crate::config::RunConfig;
use crate::data::{load_mnist, Dataset, MnistFiles, Split};
use crate::error::{Error, Result};
use crate::report::{
    histogram_records, metrics_header, read_metrics, render_table, run_points, summarize, GroupSummary, MetricsRow,
    HISTOGRAM_HEADER,
};
use crate::retention::RetentionParams;
use crate::trainer::{evaluate, run_training, Regime, TrainState};

pub const MANIFEST_VERSION: u32 = 1;
pub const METRICS_SCHEMA: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn load_data(dir: &Path, dev_size: usize, seed: u64) -> Result<Dataset> {
    match load_mnist(dir, dev_size, seed) {
        Err(Error::Io { path, source }) if source.kind() == std::io::ErrorKind::NotFound => Err(Error::Data(format!(
            "{} not found; put the four MNIST IDX files in {} (see scripts/fetch_mnist.sh)",
            path.display(),
            dir.display()
        ))),
        Err(Error::InvalidInput(m)) => Err(Error::Config(m)),
        other => other,
    }
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub regime: Option<Regime>,
}

/// Manifest text: everything that determines a run's outputs.
pub fn manifest(
    command: &str,
    cfg: &RunConfig,
    data: &[(&str, String)],
    resume: Option<&str>,
) -> String {
    let mut m = format!(
        "manifest_version = {MANIFEST_VERSION}\nmetrics_schema = {METRICS_SCHEMA}\ntool_version = {}\ncommand = {command}\nrun_id = {}\nseed = {}\ndata_seed = {}\nconfig_sha256 = {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.run_id,
        cfg.train.seed,
        cfg.data_seed,
        sha256_hex(cfg.render().as_bytes()),
    );
    if let Some(r) = resume {
        m.push_str(&format!("resume_sha256 = {r}\n"));
    }
    for (name, digest) in data {
        m.push_str(&format!("data {name} sha256 = {digest}\n"));
    }
    m
}

fn data_digests(dir: &Path) -> Result<Vec<(&'static str, String)>> {
    let files = MnistFiles::locate(dir).map_err(|_| Error::Data(format!("MNIST files not found in {}", dir.display())))?;
    let names = ["train_images", "train_labels", "test_images", "test_labels"];
    names
        .iter()
        .zip(files.all())
        .map(|(n, p)| Ok((*n, file_digest(p)?)))
        .collect()
}

fn history_from(reports: &[crate::trainer::EpochReport]) -> Vec<HistoryEntry> {
    let mut out = Vec::new();
    for w in reports.windows(2) {
        if w[1].train_units != w[0].train_units {
            out.push(HistoryEntry {
                epoch: w[1].epoch as u64,
                units: w[1].train_units.iter().map(|&u| u as u32).collect(),
            });
        }
    }
    out
}

/// `train`: runs training, writing `metrics.csv`, `histogram.csv`,
/// `manifest.txt`, `best.ckpt` and `final.ckpt` into `out`.
pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> Result<()> {
    let resumed = match &args.resume {
        Some(p) => Some((Checkpoint::load(p)?, file_digest(p)?)),
        None => None,
    };
    let text = match (&args.config, &resumed) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        (None, Some((c, _))) => c.config.clone(),
        (None, None) => String::new(),
    };
    let mut cfg = RunConfig::parse(&text, args.regime, args.seed)?;
    let data = load_data(&args.data_dir, cfg.dev_size, cfg.data_seed)?;
    let digests = data_digests(&args.data_dir)?;
    cfg.resolve(data.count(Split::Train));

    let init = match &resumed {
        Some((c, _)) => c.state.clone().for_regime(&cfg.train),
        None => TrainState::fresh(&data, &cfg.train)?,
    };
    let hidden_layers = init.params.depth() - 1;

    create_dir(&args.out)?;
    let m = manifest("train", &cfg, &digests, resumed.as_ref().map(|(_, d)| d.as_str()));
    write_file(&args.out.join("manifest.txt"), m.as_bytes())?;
    write_file(&args.out.join("config.txt"), cfg.render().as_bytes())?;

    let metrics_path = args.out.join("metrics.csv");
    let hist_path = args.out.join("histogram.csv");
    let mut metrics = csv_writer(&metrics_path)?;
    let mut hist = csv_writer(&hist_path)?;
    metrics.write_record(metrics_header(hidden_layers)).map_err(|e| csv_io(&metrics_path, e))?;
    hist.write_record(HISTOGRAM_HEADER).map_err(|e| csv_io(&hist_path, e))?;

    let regime = cfg.train.regime.name();
    let mut io_err: Option<Error> = None;
    let outcome = run_training(&data, &cfg.train, Some(init), &mut |r| {
        let row = MetricsRow::from_report(&cfg.run_id, regime, r);
        let res = metrics
            .write_record(row.record())
            .and_then(|_| metrics.flush().map_err(csv::Error::from))
            .map_err(|e| csv_io(&metrics_path, e))
            .and_then(|_| {
                for rec in histogram_records(r) {
                    hist.write_record(rec).map_err(|e| csv_io(&hist_path, e))?;
                }
                hist.flush().map_err(|e| Error::io(&hist_path, e))
            });
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
        let dev = r.dev.map_or(String::from("-"), |d| format!("{:.2}% / {:.4}", d.error, d.loss));
        let _ = writeln!(
            log,
            "epoch {:>3}  train loss {:.4}  dev {}  weights {}  units {:?}",
            r.epoch, r.train_loss, dev, r.n_weights, r.units
        );
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }

    let best = outcome.reports.iter().find(|r| r.epoch == outcome.best_epoch).and_then(|r| r.dev);
    let history = history_from(&outcome.reports);
    let best_ckpt = Checkpoint {
        config: cfg.render(),
        state: TrainState {
            epoch: outcome.best_epoch,
            velocity: crate::network::Gradients::zeros_like(&outcome.best_params),
            params: outcome.best_params.clone(),
            pi: outcome.best_pi.clone(),
            learning_rate: outcome.last.learning_rate,
            halvings: outcome.last.halvings,
            removed: outcome.last.removed,
        },
        best_epoch: outcome.best_epoch as u64,
        best_dev_error: best.map_or(f64::NAN, |e| e.error),
        best_dev_loss: best.map_or(f64::NAN, |e| e.loss),
        history: history.clone(),
    };
    best_ckpt.save(&args.out.join("best.ckpt"))?;
    let final_ckpt = Checkpoint {
        state: outcome.last.clone(),
        ..best_ckpt
    };
    final_ckpt.save(&args.out.join("final.ckpt"))?;
    let _ = writeln!(
        log,
        "best epoch {}  weights {}  -> {}",
        outcome.best_epoch,
        count_weights(&outcome.best_params),
        args.out.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub split: Split,
    pub out: Option<PathBuf>,
}

pub const EVAL_HEADER: [&str; 6] = ["checkpoint", "split", "examples", "n_weights", "error", "loss"];

/// `eval`: returns the CSV text (header and one row) it also prints.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = RunConfig::parse(&ckpt.config, None, None)?;
    let data = load_data(&args.data_dir, cfg.dev_size, cfg.data_seed)?;
    if data.count(args.split) == 0 {
        return Err(Error::Data(format!("split '{}' is empty", args.split.name())));
    }
    let e = evaluate(&ckpt.state.params, &ckpt.state.pi, &data, args.split)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let name = args.checkpoint.display().to_string();
    let rec = [
        name,
        args.split.name().to_string(),
        e.examples.to_string(),
        count_weights(&ckpt.state.params).to_string(),
        format!("{:?}", e.error),
        format!("{:?}", e.loss),
    ];
    w.write_record(EVAL_HEADER).and_then(|_| w.write_record(&rec)).expect("in-memory csv");
    let text = String::from_utf8(w.into_inner().expect("in-memory csv")).unwrap();
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("eval.csv"), text.as_bytes())?;
    }
    Ok(text)
}

#[derive(Clone, Debug)]
pub enum CompactMode {
    Prune { threshold: f64 },
    /// Explicit ranks, or `ceil(D / divisor)` per hidden-to-hidden matrix.
    Svd { ranks: Option<Vec<usize>>, divisor: usize },
}

pub struct CompactArgs {
    pub checkpoint: PathBuf,
    pub mode: CompactMode,
    pub out: PathBuf,
}

fn describe_prune(rep: &CompactionReport) -> String {
    let mut s = String::from("mode = prune\n");
    for l in &rep.layers {
        s.push_str(&format!(
            "layer {}: original {} kept {} removed {} kept_units {:?}\n",
            l.layer,
            l.original,
            l.kept.len(),
            l.removed(),
            l.kept
        ));
    }
    s.push_str(&format!(
        "weights_before = {}\nweights_after = {}\ncompression_ratio = {:.6}\n",
        rep.weights_before,
        rep.weights_after,
        rep.compression_ratio()
    ));
    s
}

/// `compact`: writes `compact.ckpt` and `compaction.txt`; returns the report.
pub fn cmd_compact(args: &CompactArgs) -> Result<String> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let state = &ckpt.state;
    let before = count_weights(&state.params);
    let (params, report) = match &args.mode {
        CompactMode::Prune { threshold } => {
            let (p, _, rep) = export_compact(&state.params, &state.pi, *threshold)?;
            (p, describe_prune(&rep))
        }
        CompactMode::Svd { ranks, divisor } => {
            let folded = absorb_retention(&state.params, &state.pi)?;
            let ranks = match ranks {
                Some(r) => r.clone(),
                None => bottleneck_ranks(&folded, *divisor)?,
            };
            let p = svd_compact(&folded, &ranks)?;
            let after = count_weights(&p);
            let text = format!(
                "mode = svd\nranks = {ranks:?}\nweights_before = {before}\nweights_after = {after}\ncompression_ratio = {:.6}\n",
                after as f64 / before as f64
            );
            (p, text)
        }
    };
    let pi = RetentionParams::ones(&params);
    let out = Checkpoint {
        config: ckpt.config.clone(),
        state: TrainState {
            epoch: state.epoch,
            velocity: crate::network::Gradients::zeros_like(&params),
            params,
            pi,
            learning_rate: state.learning_rate,
            halvings: state.halvings,
            removed: state.removed,
        },
        best_epoch: ckpt.best_epoch,
        best_dev_error: ckpt.best_dev_error,
        best_dev_loss: ckpt.best_dev_loss,
        history: ckpt.history.clone(),
    };
    create_dir(&args.out)?;
    out.save(&args.out.join("compact.ckpt"))?;
    write_file(&args.out.join("compaction.txt"), report.as_bytes())?;
    Ok(report)
}

pub enum BenchTarget {
    Shape(Vec<usize>),
    Checkpoint(PathBuf),
}

pub struct BenchArgs {
    pub target: BenchTarget,
    pub reference: Option<Vec<usize>>,
    pub batch: usize,
    pub reps: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

pub struct BenchOutput {
    pub csv: String,
    pub summary: String,
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchOutput> {
    let dims = match &args.target {
        BenchTarget::Shape(d) => d.clone(),
        BenchTarget::Checkpoint(p) => Checkpoint::load(p)?.state.params.layer_dims(),
    };
    flop_count(&dims)?;
    let cand = time_forward(&dims, args.batch, args.reps, args.seed)?;
    let reference = match &args.reference {
        Some(r) => Some(time_forward(r, args.batch, args.reps, args.seed)?),
        None => None,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BenchResult::CSV_HEADER).expect("in-memory csv");
    let mut summary = String::new();
    if let Some(r) = &reference {
        w.write_record(r.csv_record(Some(1.0))).expect("in-memory csv");
    }
    let speedup = reference.as_ref().map(|r| cand.speedup_over(r));
    w.write_record(cand.csv_record(speedup)).expect("in-memory csv");
    summary.push_str(&format!(
        "{}: {} MACs/example, median {:.3} us at batch {} ({:.0} examples/s)\n",
        cand.shape_string(),
        cand.flops,
        cand.median * 1e6,
        cand.batch,
        cand.throughput
    ));
    if let Some(r) = &reference {
        summary.push_str(&format!(
            "reference {}: {} MACs/example, median {:.3} us\nflop ratio {:.4}, measured speedup {:.3}\n",
            r.shape_string(),
            r.flops,
            r.median * 1e6,
            r.flops as f64 / cand.flops as f64,
            cand.speedup_over(r)
        ));
    }
    if args.workers > 1 {
        let t = parallel_throughput(&dims, args.batch, args.workers, Duration::from_secs(1), args.seed)?;
        summary.push_str(&format!("{} workers: {:.0} examples/s\n", args.workers, t));
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory csv")).unwrap();
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("bench.csv"), csv.as_bytes())?;
    }
    Ok(BenchOutput { csv, summary })
}

pub struct ReportOutput {
    pub table: String,
    pub groups: Vec<GroupSummary>,
}

/// `report`: writes `summary.csv` (one row per regime and architecture) and
/// `plot.csv` (one point per run) into `out`.
pub fn cmd_report(files: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if files.is_empty() {
        return Err(Error::Config("report needs at least one metrics file".into()));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_metrics(f)?);
    }
    let points = run_points(&rows);
    let groups = summarize(&points);
    create_dir(out)?;
    let sp = out.join("summary.csv");
    let mut w = csv_writer(&sp)?;
    w.write_record(GroupSummary::CSV_HEADER).map_err(|e| csv_io(&sp, e))?;
    for g in &groups {
        w.write_record(g.record()).map_err(|e| csv_io(&sp, e))?;
    }
    w.flush().map_err(|e| Error::io(&sp, e))?;
    let pp = out.join("plot.csv");
    let mut w = csv_writer(&pp)?;
    w.write_record(["regime", "arch", "run_id", "epoch", "n_weights", "test_err", "test_loss", "dev_err"])
        .map_err(|e| csv_io(&pp, e))?;
    for p in &points {
        let r = &p.row;
        w.write_record([
            p.regime.clone(),
            p.arch.clone(),
            r.run_id.clone(),
            r.epoch.to_string(),
            r.n_weights.to_string(),
            format!("{:?}", r.test_err),
            format!("{:?}", r.test_loss),
            format!("{:?}", r.dev_err),
        ])
        .map_err(|e| csv_io(&pp, e))?;
    }
    w.flush().map_err(|e| Error::io(&pp, e))?;
    Ok(ReportOutput {
        table: render_table(&groups),
        groups,
    })
}

/// Parses a `--shape` argument, mapping failures to configuration errors.
pub fn shape_arg(s: &str) -> Result<Vec<usize>> {
    parse_shape(s).map_err(|e| Error::Config(e.to_string()))
}

//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N: PASS|FAIL` line each; the test fails if any hard check
//! fails. The MNIST criteria need the four IDX files in `data/mnist` (or
//! `DROPCOMPACT_MNIST`); fetch them with `scripts/fetch_mnist.sh`.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture` to see
//! the report as it is produced.

mod common;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dropcompact::bench::{flop_count, time_forward};
use dropcompact::checkpoint::Checkpoint;
use dropcompact::cli::{cmd_compact, cmd_train, load_data, CompactArgs, CompactMode, TrainArgs};
use dropcompact::config::RunConfig;
use dropcompact::compaction::{absorb_retention, bottleneck_ranks, count_weights, prune_units, svd_compact};
use dropcompact::data::{synth_blobs, split_train_dev, Split};
use dropcompact::linalg::Rng;
use dropcompact::network::{forward_expected, Activation, MlpParams};
use dropcompact::report::{histogram_records, read_metrics, selected_row, MetricsRow, HISTOGRAM_HEADER};
use dropcompact::retention::RetentionParams;
use dropcompact::trainer::{run_training, EpochReport, Regime, TrainConfig, TrainOutcome};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- MNIST

fn train_run(out: &Path, config: &str, resume: Option<PathBuf>, regime: Option<Regime>) -> Vec<MetricsRow> {
    let data_dir = common::mnist_dir().expect("checked by caller");
    std::fs::create_dir_all(out).unwrap();
    let cfg_path = out.with_extension("cfg");
    std::fs::write(&cfg_path, config).unwrap();
    let args = TrainArgs {
        config: Some(cfg_path),
        data_dir,
        out: out.to_path_buf(),
        resume,
        seed: None,
        regime,
    };
    cmd_train(&args, &mut std::io::sink()).unwrap();
    read_metrics(&out.join("metrics.csv")).unwrap()
}

fn best_row(rows: &[MetricsRow]) -> MetricsRow {
    let refs: Vec<&MetricsRow> = rows.iter().collect();
    rows[selected_row(&refs).unwrap()].clone()
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&v)
}

struct MnistRuns {
    c1: Outcome,
    c2: Outcome,
}

fn mnist_criteria(root: &Path) -> MnistRuns {
    let mut d = String::new();
    let mut pass = true;

    // Baseline 784-50-50-10, plain.
    let plain_dir = root.join("plain50");
    let rows = train_run(&plain_dir, "regime = plain\nhidden = 50,50\nrun_id = plain50\n", None, None);
    let b = best_row(&rows);
    let ok = in_range(b.test_err, 2.6, 3.6) && b.n_weights == 42200;
    pass &= ok;
    let _ = write!(
        d,
        "\n    plain 50-50: epoch {} test err {:.2}% (want [2.6, 3.6]), weights {} (want 42200) {}",
        b.epoch,
        b.test_err,
        b.n_weights,
        if ok { "ok" } else { "MISS" }
    );

    // Compaction from 784-100-100-10, through the library so every epoch's
    // exact retention values are visible. The histogram file is written with
    // the same record function the CLI uses.
    let comp_dir = root.join("compaction100");
    let comp = compaction_run(&comp_dir);
    let b = comp.reports.iter().find(|r| r.epoch == comp.best_epoch).unwrap();
    let test = b.test.unwrap();
    let weights = count_weights(&comp.best_params);
    let ok = in_range(weights as f64, 38000.0, 56000.0) && test.error <= 3.2 && test.loss <= 0.14 && weights == b.n_weights;
    pass &= ok;
    let _ = write!(
        d,
        "\n    compaction 100-100: epoch {} weights {} (want [38000, 56000]) units {:?}, test err {:.2}% (want <= 3.2), test loss {:.4} (want <= 0.14) {}",
        b.epoch,
        weights,
        b.units,
        test.error,
        test.loss,
        if ok { "ok" } else { "MISS" }
    );

    // SVD bottleneck from the best plain model, then plain fine-tuning.
    let svd_dir = root.join("svd50");
    cmd_compact(&CompactArgs {
        checkpoint: plain_dir.join("best.ckpt"),
        mode: CompactMode::Svd {
            ranks: Some(vec![7]),
            divisor: 8,
        },
        out: svd_dir.clone(),
    })
    .unwrap();
    let svd_weights = count_weights(&Checkpoint::load(&svd_dir.join("compact.ckpt")).unwrap().state.params);
    let tune_dir = root.join("svd50_tuned");
    let rows = train_run(
        &tune_dir,
        "regime = plain\nhidden = 50,50\nrun_id = svd50\n",
        Some(svd_dir.join("compact.ckpt")),
        Some(Regime::Plain),
    );
    let b = best_row(&rows);
    let ok = svd_weights == 40400 && b.n_weights == 40400 && b.test_err <= 3.9;
    pass &= ok;
    let _ = write!(
        d,
        "\n    svd 50 k=7: weights {} (want 40400), fine-tuned test err {:.2}% at epoch {} (want <= 3.9) {}",
        svd_weights,
        b.test_err,
        b.epoch,
        if ok { "ok" } else { "MISS" }
    );

    // Large-net counts from constructed models (no training).
    let large = large_counts();
    let ok = large.iter().all(|(_, got, want)| got == want);
    pass &= ok;
    for (name, got, want) in &large {
        let _ = write!(d, "\n    {name}: {got} (formula {want})");
    }
    let _ = write!(d, "\n    (the ~481277 compaction count is a run average and has no closed form)");

    let c2 = convergence(&comp_dir, &comp.reports);
    MnistRuns {
        c1: outcome(pass, d),
        c2,
    }
}

/// Independent counting formula: sum of products of adjacent widths.
fn formula(dims: &[usize]) -> usize {
    let mut total = 0;
    for i in 1..dims.len() {
        total += dims[i - 1] * dims[i];
    }
    total
}

fn large_counts() -> Vec<(String, usize, usize)> {
    let mut rng = Rng::new(1);
    let p400 = MlpParams::glorot(&[784, 400, 400, 10], Activation::Relu, &mut rng).unwrap();
    let ranks = bottleneck_ranks(&p400, 8).unwrap();
    let s400 = svd_compact(&p400, &ranks).unwrap();
    vec![
        ("784-400-400-10".into(), count_weights(&p400), formula(&[784, 400, 400, 10])),
        (
            format!("784-400-400-10 svd k={}", ranks[0]),
            count_weights(&s400),
            formula(&[784, 400, 50, 400, 10]),
        ),
    ]
}

fn compaction_run(dir: &Path) -> TrainOutcome {
    let data_dir = common::mnist_dir().expect("checked by caller");
    let mut cfg = RunConfig::parse("regime = compaction\nhidden = 100,100\n", None, None).unwrap();
    let data = load_data(&data_dir, cfg.dev_size, cfg.data_seed).unwrap();
    cfg.resolve(data.count(Split::Train));
    std::fs::create_dir_all(dir).unwrap();
    let mut hist = csv::Writer::from_path(dir.join("histogram.csv")).unwrap();
    hist.write_record(HISTOGRAM_HEADER).unwrap();
    let out = run_training(&data, &cfg.train, None, &mut |r| {
        for rec in histogram_records(r) {
            hist.write_record(rec).unwrap();
        }
    })
    .unwrap();
    hist.flush().unwrap();
    out
}

fn convergence(comp_dir: &Path, reports: &[EpochReport]) -> Outcome {
    let mut rdr = csv::Reader::from_path(comp_dir.join("histogram.csv")).unwrap();
    // (epoch, 20 counts)
    let mut hist: Vec<(usize, Vec<usize>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let epoch: usize = rec[0].parse().unwrap();
        let count: usize = rec[3].parse().unwrap();
        match hist.last_mut() {
            Some((e, v)) if *e == epoch => v.push(count),
            _ => hist.push((epoch, vec![count])),
        }
    }
    let population: usize = hist[0].1.iter().sum();
    let sums_ok = hist.iter().all(|(_, v)| v.len() == 20 && v.iter().sum::<usize>() == population);

    // Bins strictly between the outer two, i.e. (0.05, 0.95).
    let middle: Vec<(usize, usize)> = hist.iter().map(|(e, v)| (*e, v[1..19].iter().sum())).collect();
    let onset = middle.iter().position(|&(_, m)| m < population).unwrap_or(middle.len());
    let monotone = middle[onset.saturating_sub(1)..].windows(2).all(|w| w[1].1 <= w[0].1);
    let drained = middle.last().unwrap().1 * 100 < population;
    let drain: Vec<String> = middle.iter().map(|(e, m)| format!("{e}:{m}")).collect();

    // The run may stop early; the last report then stands for epoch 15.
    let at = reports.iter().find(|r| r.epoch == 15).unwrap_or(reports.last().unwrap());
    let pass = at.converged >= 0.99 && monotone && drained && sums_ok;
    outcome(
        pass,
        format!(
            "{:.2}% of {population} hidden retention values within 1e-3 of 0 or 1 at epoch {} (want >= 99%); middle-bin counts by epoch [{}], non-increasing after onset: {monotone}, below 1% at the end: {drained}",
            100.0 * at.converged,
            at.epoch,
            drain.join(" ")
        ),
    )
}

// ------------------------------------------------------------ criterion 3

fn gradient_criterion() -> Outcome {
    let r = common::gradient_check(100, 2024);
    outcome(
        r.failures.is_empty(),
        format!(
            "{} nets, {} parameters, worst relative error {:.2e}, {} over tolerance{}",
            r.nets,
            r.params_checked,
            r.worst_rel,
            r.failures.len(),
            r.failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// -------------------------------------------------------- criteria 4 and 5

const DRAWS: usize = 100_000;
const MC_SEEDS: [u64; 3] = [1, 2, 3];

/// Exact per-unit variances of the data term on the fixture, as first
/// computed by the enumeration oracle, C = 0 then C = 1.
const COMMITTED_VAR_C0: [f64; 5] = [9.266791320809192, 6.084374439440041, 4.781437646406992, 6.689017620528483, 5.7280047740607225];
const COMMITTED_VAR_C1: [f64; 5] = [0.7398741043969232, 1.067591519820114, 0.2419111958982486, 1.2848194651609284, 1.1369601256294941];

fn estimator_criteria() -> (Outcome, Outcome) {
    let (params, pi, x, k) = common::estimator_fixture();
    let units: usize = pi.layers().iter().map(Vec::len).sum();
    let mut d4 = format!("{units} maskable units, {} masks enumerated, {DRAWS} draws", 1 << units);
    let mut pass4 = true;
    let mut exact = Vec::new();
    let mut mc = Vec::new();
    for c in [0.0, 1.0] {
        let (mean, var) = common::enumerate_estimator(&params, &pi, &x, k, c, 100.0);
        let m = common::monte_carlo_estimator(&params, &pi, &x, k, c, DRAWS, MC_SEEDS[0]);
        let worst = (0..units)
            .map(|u| (m.mean[u] - mean[u]).abs() / m.se[u])
            .fold(0.0, f64::max);
        pass4 &= worst <= 3.0;
        let _ = write!(d4, "; C={c}: worst |MC - exact| = {worst:.2} SE");
        exact.push((mean, var));
        mc.push(m);
    }
    let exact_gap = exact[0].0.iter().zip(&exact[1].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mc_gap = (0..units)
        .map(|u| (mc[0].mean[u] - mc[1].mean[u]).abs() / (mc[0].se[u].powi(2) + mc[1].se[u].powi(2)).sqrt())
        .fold(0.0, f64::max);
    pass4 &= mc_gap <= 3.0 && exact_gap < 1e-12;
    let _ = write!(d4, "; C=0 vs C=1 means differ by {mc_gap:.2} SE (exact gap {exact_gap:.1e})");

    // Variance: the committed oracle values, then every seed of the set.
    let mut pass5 = true;
    let (v0, v1) = (&exact[0].1, &exact[1].1);
    let committed = COMMITTED_VAR_C0
        .iter()
        .zip(v0)
        .chain(COMMITTED_VAR_C1.iter().zip(v1))
        .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0));
    pass5 &= committed;
    pass5 &= v0.iter().zip(v1).all(|(a, b)| b < a);
    let mut d5 = format!(
        "exact per-unit variance C=0 {:?}, C=1 {:?} (matches committed: {committed})",
        round(v0),
        round(v1)
    );
    for &seed in &MC_SEEDS {
        let a = common::monte_carlo_estimator(&params, &pi, &x, k, 0.0, DRAWS / 10, seed);
        let b = common::monte_carlo_estimator(&params, &pi, &x, k, 1.0, DRAWS / 10, seed);
        let lower = a.var.iter().zip(&b.var).all(|(v0, v1)| v1 < v0);
        pass5 &= lower;
        let _ = write!(
            d5,
            "; seed {seed}: total sample variance {:.3} -> {:.3}",
            a.var.iter().sum::<f64>(),
            b.var.iter().sum::<f64>()
        );
    }
    (outcome(pass4, d4), outcome(pass5, d5))
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

// ------------------------------------------------------------ criterion 6

fn equivalence_criterion() -> Outcome {
    let mut rng = Rng::new(6);
    let mut worst: f64 = 0.0;
    let mut models = 0;
    for (m, act) in [(0, Activation::Relu), (1, Activation::Sigmoid), (2, Activation::Relu)] {
        let dims = [12 + m, 15, 11, 9, 4];
        let params = common::random_net(&dims, act, &mut rng);
        let mut layers: Vec<Vec<f64>> = vec![vec![1.0; dims[0]]];
        for &w in &dims[1..dims.len() - 1] {
            let mut v: Vec<f64> = (0..w).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
            v[rng.below(w)] = 1.0;
            layers.push(v);
        }
        let pi = RetentionParams::new(layers).unwrap();
        let (pruned, pruned_pi, _) = prune_units(&params, &pi, 0.5).unwrap();
        let folded = absorb_retention(&pruned, &pruned_pi).unwrap();
        let ones = RetentionParams::ones(&folded);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let a = forward_expected(&params, &x, &pi).unwrap();
            let b = forward_expected(&folded, &x, &ones).unwrap();
            for (p, q) in a.logits().iter().zip(b.logits()) {
                worst = worst.max((p - q).abs());
            }
        }
        models += 1;
    }
    let mut rng = Rng::new(7);
    let mut counts = Vec::new();
    let mut build = |dims: &[usize], svd: Option<usize>| {
        let p = MlpParams::glorot(dims, Activation::Relu, &mut rng).unwrap();
        match svd {
            None => count_weights(&p),
            Some(k) => count_weights(&svd_compact(&p, &[k]).unwrap()),
        }
    };
    counts.push((42200, build(&[784, 50, 50, 10], None), formula(&[784, 50, 50, 10])));
    counts.push((477600, build(&[784, 400, 400, 10], None), formula(&[784, 400, 400, 10])));
    counts.push((40400, build(&[784, 50, 50, 10], Some(7)), formula(&[784, 50, 7, 50, 10])));
    counts.push((357600, build(&[784, 400, 400, 10], Some(50)), formula(&[784, 400, 50, 400, 10])));
    counts.push((82000, build(&[784, 100, 100, 10], Some(13)), formula(&[784, 100, 13, 100, 10])));
    let counts_ok = counts.iter().all(|&(cited, built, f)| cited == built && built == f);
    outcome(
        worst <= 1e-9 && counts_ok,
        format!(
            "{models} binary-retention models x 1000 inputs, max |Δ logit| {worst:.1e} (want <= 1e-9); counts {:?} match formula: {counts_ok}",
            counts.iter().map(|c| c.1).collect::<Vec<_>>()
        ),
    )
}

// ------------------------------------------------------------ criterion 7

fn speedup_criterion() -> (Outcome, String) {
    let big = [544, 1536, 1536, 1536, 1536, 2500];
    let small = [544, 768, 768, 768, 768, 2500];
    let ratio = flop_count(&big).unwrap() as f64 / flop_count(&small).unwrap() as f64;
    let want = formula(&big) as f64 / formula(&small) as f64;
    let pass = (ratio - want).abs() < 1e-12 && (ratio - 2.8616).abs() < 1e-4;
    let a = time_forward(&small, 1, 30, 1).unwrap();
    let b = time_forward(&big, 1, 30, 1).unwrap();
    let measured = b.median / a.median;
    let soft = if measured >= 1.8 { "met" } else { "NOT met (soft)" };
    (
        outcome(
            pass,
            format!(
                "analytic FLOP ratio {ratio:.4} = counting formula {want:.4}; the quoted ~2.56 does not follow from these shapes (see notes)"
            ),
        ),
        format!("measured median latency ratio at batch 1: {measured:.2} ({:.3} ms vs {:.3} ms), >= 1.8 {soft}", b.median * 1e3, a.median * 1e3),
    )
}

// ------------------------------------------------------------ criterion 8

fn trajectory(r: &EpochReport) -> impl PartialEq + std::fmt::Debug + '_ {
    (
        r.epoch,
        r.learning_rate.to_bits(),
        r.train_loss.to_bits(),
        r.dev.map(|e| (e.error.to_bits(), e.loss.to_bits())),
        r.test.map(|e| (e.error.to_bits(), e.loss.to_bits())),
        &r.units,
        r.n_weights,
        &r.train_units,
        r.histogram,
    )
}

fn degeneracy_criterion() -> Outcome {
    let blobs = synth_blobs(400, 4, 24, 3.0, 5).unwrap();
    let data = split_train_dev(blobs, 300, 5).unwrap();
    let mut base = TrainConfig::mnist(Regime::Dropout, vec![32, 32], data.count(Split::Train));
    base.epochs = 6;
    base.batch_size = 32;
    base.learning_rate = 0.01;
    base.l2 = 1e-5;
    base.seed = 17;

    let run = |cfg: &TrainConfig| -> TrainOutcome { run_training(&data, cfg, None, &mut |_| {}).unwrap() };

    let dropout = run(&base);
    let mut comp = base.clone();
    comp.regime = Regime::Compaction;
    comp.prior.gamma = 0.0;
    comp.retention.learning_rate = 0.0;
    let compaction = run(&comp);
    let same_dropout = dropout.reports.len() == compaction.reports.len()
        && dropout.reports.iter().zip(&compaction.reports).all(|(a, b)| trajectory(a) == trajectory(b))
        && dropout.last.params == compaction.last.params
        && compaction.last.pi == dropout.last.pi;

    let mut plain = base.clone();
    plain.regime = Regime::Plain;
    let mut ones = base.clone();
    ones.hidden_retention = 1.0;
    let p = run(&plain);
    let o = run(&ones);
    let same_plain = p.reports == o.reports && p.last.params == o.last.params && p.best_epoch == o.best_epoch;
    outcome(
        same_dropout && same_plain,
        format!(
            "compaction (gamma 0, retention lr 0) vs dropout 0.5 over {} epochs bit-identical: {same_dropout}; plain vs dropout with retention 1 bit-identical: {same_plain}",
            base.epochs
        ),
    )
}

// -----------------------------------------------------------------------

// Runs without the libtest harness so the criterion lines are never captured.
fn main() {
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        let line = format!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        if !o.pass {
            failed.push(n);
        }
        lines.push(line);
    };

    match common::mnist_dir() {
        Some(_) => {
            let root = tempfile::tempdir().unwrap();
            let runs = mnist_criteria(root.path());
            record(1, runs.c1);
            record(2, runs.c2);
        }
        None => {
            let why = "MNIST not found: run scripts/fetch_mnist.sh or set DROPCOMPACT_MNIST to a directory with the four IDX files".to_string();
            record(1, outcome(false, why.clone()));
            record(2, outcome(false, why));
        }
    }
    record(3, gradient_criterion());
    let (c4, c5) = estimator_criteria();
    record(4, c4);
    record(5, c5);
    record(6, equivalence_criterion());
    let (c7, soft) = speedup_criterion();
    record(7, c7);
    println!("    {soft}");
    record(8, degeneracy_criterion());

    if !failed.is_empty() {
        eprintln!("failed criteria {failed:?}:\n{}", lines.join("\n"));
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}

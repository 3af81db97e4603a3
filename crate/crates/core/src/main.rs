use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dropcompact::cli::{
    cmd_bench, cmd_compact, cmd_eval, cmd_report, cmd_train, shape_arg, BenchArgs, BenchTarget, CompactArgs,
    CompactMode, EvalArgs, TrainArgs,
};
use dropcompact::data::Split;
use dropcompact::trainer::Regime;
use dropcompact::{Error, Result};

/// Dropout training with learned per-unit retention and unit removal.
///
/// Exit status: 0 success, 2 configuration or argument error, 3 data error,
/// 4 structural error (a layer would lose all units).
#[derive(Parser)]
#[command(name = "dropcompact", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Plain,
    Dropout,
    Annealed,
    Compaction,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Plain => Regime::Plain,
            RegimeArg::Dropout => Regime::Dropout,
            RegimeArg::Annealed => Regime::Annealed,
            RegimeArg::Compaction => Regime::Compaction,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Prune,
    Svd,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, histograms and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (also used to fine-tune compacted models).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove units or insert SVD bottlenecks.
    Compact {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "prune")]
        mode: ModeArg,
        /// Prune threshold on the retention probability.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Bottleneck rank is ceil(width / divisor) unless --rank is given.
        #[arg(long, default_value_t = 8)]
        divisor: usize,
        /// Comma-separated ranks, one per hidden-to-hidden matrix.
        #[arg(long)]
        rank: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time dense forward passes.
    Bench {
        /// Layer widths, e.g. 784-100-100-10 or 544,1536x4,2500.
        #[arg(long, conflicts_with = "checkpoint")]
        shape: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Shape to compare against.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also measure multi-threaded throughput with this many workers.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics files across runs.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut err = std::io::stderr();
    match cli.command {
        Command::Train {
            config,
            data_dir,
            out,
            resume,
            seed,
            regime,
        } => cmd_train(
            &TrainArgs {
                config,
                data_dir,
                out,
                resume,
                seed,
                regime: regime.map(Regime::from),
            },
            &mut err,
        ),
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            out,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let text = cmd_eval(&EvalArgs {
                checkpoint,
                data_dir,
                split,
                out,
            })?;
            let _ = stdout.lock().write_all(text.as_bytes());
            Ok(())
        }
        Command::Compact {
            checkpoint,
            mode,
            threshold,
            divisor,
            rank,
            out,
        } => {
            let mode = match mode {
                ModeArg::Prune => CompactMode::Prune { threshold },
                ModeArg::Svd => {
                    let ranks = rank
                        .map(|r| {
                            r.split(',')
                                .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad rank '{v}'"))))
                                .collect::<Result<Vec<usize>>>()
                        })
                        .transpose()?;
                    CompactMode::Svd { ranks, divisor }
                }
            };
            let report = cmd_compact(&CompactArgs { checkpoint, mode, out })?;
            let _ = stdout.lock().write_all(report.as_bytes());
            Ok(())
        }
        Command::Bench {
            shape,
            checkpoint,
            reference,
            batch,
            reps,
            seed,
            workers,
            out,
        } => {
            let target = match (shape, checkpoint) {
                (Some(s), _) => BenchTarget::Shape(shape_arg(&s)?),
                (None, Some(c)) => BenchTarget::Checkpoint(c),
                (None, None) => return Err(Error::Config("bench needs --shape or --checkpoint".into())),
            };
            let reference = reference.as_deref().map(shape_arg).transpose()?;
            let res = cmd_bench(&BenchArgs {
                target,
                reference,
                batch,
                reps,
                seed,
                workers,
                out,
            })?;
            let _ = stdout.lock().write_all(res.csv.as_bytes());
            let _ = err.write_all(res.summary.as_bytes());
            Ok(())
        }
        Command::Report { metrics, out } => {
            let rep = cmd_report(&metrics, &out)?;
            let _ = stdout.lock().write_all(rep.table.as_bytes());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

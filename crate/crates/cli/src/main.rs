//! `bitalloc`: generate demonstrations, train the controller, allocate bits
//! and evaluate allocations in closed loop.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bitalloc_core::allocator::Criterion;
use clap::{Args, Parser, Subcommand};

use crate::commands::EvalTarget;
use crate::config::{EstimatorName, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "bitalloc", version, about = "Task-aware bit allocation for a learned pendulum controller")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the stage this command runs (data, training or evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Divergence estimator used by the `kld` method.
    #[arg(long, global = true, value_enum)]
    estimator: Option<EstimatorName>,
    /// Monte-Carlo episodes per evaluation.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Primary output path of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll LQR demonstrations and write the train/test datasets.
    GenData,
    /// Train the controller network on the demonstrations.
    Train,
    /// Select an allocation at one budget and write its score table.
    Allocate {
        #[arg(long)]
        r_sum: u32,
        /// equal, mse, kld (uses --estimator), kld_hist or kld_knn.
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Closed-loop error probability of an allocation.
    Evaluate {
        /// Per-feature bit depths, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["r_sum", "method"])]
        bits: Option<Vec<u32>>,
        #[arg(long, requires = "method")]
        r_sum: Option<u32>,
        #[arg(long, value_parser = parse_method, requires = "r_sum")]
        method: Option<Method>,
    },
    /// Every method at every budget, with a resumable checkpoint.
    Sweep {
        /// Restrict to one budget.
        #[arg(long)]
        r_sum: Option<u32>,
        /// Restrict to one method.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Input-distribution drift between T1 and loops quantized at each budget.
    DriftCheck {
        #[arg(long)]
        r_sum: Option<u32>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Plot-ready CSV from a finished sweep.
    ExportPlot {
        /// Sweep directory; defaults to `<reports>/sweep`.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
}

/// A method name as typed; `kld` defers the estimator to `--estimator`.
#[derive(Debug, Clone, Copy)]
enum Method {
    Fixed(Criterion),
    Kld,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "kld" => Ok(Method::Kld),
        _ => s.parse::<Criterion>().map(Method::Fixed).map_err(|e| e.to_string()),
    }
}

impl Method {
    fn resolve(self, cfg: &RunConfig) -> Criterion {
        match self {
            Method::Fixed(c) => c,
            Method::Kld => cfg.estimator.criterion(),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = cli.common.estimator {
        cfg.estimator = e;
    }
    if let Some(n) = cli.common.iterations {
        cfg.iterations = n;
    }
    if let Some(t) = cli.common.threads.or(cfg.threads) {
        cfg.threads = Some(t);
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let seed = cli.common.seed;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::GenData => {
            if let Some(s) = seed {
                cfg.seeds.data = s;
            }
            let dir = out.map(PathBuf::from).unwrap_or_else(|| cfg.paths.data_dir.clone());
            commands::gen_data(&cfg, &dir)
        }
        Command::Train => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let path = out.map(PathBuf::from).unwrap_or_else(|| cfg.paths.model.clone());
            commands::train(&cfg, &path)
        }
        Command::Allocate { r_sum, method } => {
            if let Some(s) = seed {
                cfg.seeds.knn = s;
            }
            let m = method.resolve(&cfg);
            commands::allocate(&cfg, r_sum, m, out)
        }
        Command::Evaluate { bits, r_sum, method } => {
            if let Some(s) = seed {
                cfg.seeds.eval = s;
            }
            let target = match (bits, r_sum, method) {
                (Some(b), _, _) => EvalTarget::Bits(b),
                (None, Some(r), Some(m)) => EvalTarget::Select { r_sum: r, method: m.resolve(&cfg) },
                _ => return Err(usage("evaluate needs --bits or both --r-sum and --method")),
            };
            commands::evaluate(&cfg, target, out).map(|_| ())
        }
        Command::Sweep { r_sum, method } => {
            if let Some(s) = seed {
                cfg.seeds.eval = s;
            }
            let r_sums = r_sum.map(|r| vec![r]).unwrap_or_else(|| cfg.r_sums());
            let methods = method.map(|m| vec![m.resolve(&cfg)]).unwrap_or_else(|| cfg.methods.clone());
            let dir = out.map(PathBuf::from).unwrap_or_else(|| cfg.paths.reports.join("sweep"));
            commands::sweep_cmd(&cfg, r_sums, methods, &dir)
        }
        Command::DriftCheck { r_sum, method } => {
            if let Some(s) = seed {
                cfg.seeds.eval = s;
            }
            let r_sums = r_sum.map(|r| vec![r]).unwrap_or_else(|| cfg.r_sums());
            let m = method.map(|m| m.resolve(&cfg)).unwrap_or(Criterion::KldHist);
            let path = out.map(PathBuf::from).unwrap_or_else(|| cfg.paths.reports.join("drift.csv"));
            commands::drift_check(&cfg, r_sums, m, &path)
        }
        Command::ExportPlot { sweep } => {
            let dir = sweep.unwrap_or_else(|| cfg.paths.reports.join("sweep"));
            let path = out.map(PathBuf::from).unwrap_or_else(|| cfg.paths.reports.join("plot.csv"));
            commands::export_plot(&dir, &path)
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: &str) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() || commands::is_usage_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dptail_core::harness::{self, Experiment, ExperimentConfig, ModeSelection};

#[derive(Parser)]
#[command(name = "dptail", version, about = "DP-SGD long-tail memorization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/test sets and initial weights into binary containers.
    Gen(Common),
    /// Paired Clean/DP training traces (alignment, loss, clipping).
    Dynamics(Common),
    /// Accuracy heatmap over signal norm × NCR.
    Sweep(Common),
    /// Full-set vs long-tail test error for Clean and DP models.
    Longtail(Common),
    /// Accuracy on top/bottom influence-score quantiles of MNIST.
    Mnist(MnistArgs),
    /// Condition report, bound arguments and the loss-floor scan.
    Diag(Common),
    /// Render a (row, column, value) CSV as an SVG heatmap.
    Render {
        csv: PathBuf,
        svg: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; omitted leaves take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// clean, dp or both.
    #[arg(long)]
    mode: Option<ModeSelection>,
    /// Repetitions per sweep cell.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Clone)]
struct MnistArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding the four IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self, experiment: Experiment) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.experiment = experiment;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(m) = self.mode {
            cfg.optimizer.mode = m;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        Ok(cfg)
    }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(c) => report(&harness::run_gen(&c.load(Experiment::Dynamics)?)?.files),
        Command::Dynamics(c) => report(&harness::run_dynamics(&c.load(Experiment::Dynamics)?)?.files),
        Command::Sweep(c) => report(&harness::run_heatmap_sweep(&c.load(Experiment::HeatmapSweep)?)?.files),
        Command::Longtail(c) => report(&harness::run_longtail_eval(&c.load(Experiment::LongtailEval)?)?.files),
        Command::Diag(c) => report(&harness::run_diagnostics(&c.load(Experiment::Diagnostics)?)?.files),
        Command::Mnist(a) => {
            let mut cfg = a.common.load(Experiment::MnistInfluence)?;
            if let Some(d) = a.mnist_dir {
                cfg.mnist.dir = Some(d);
            }
            report(&harness::run_mnist_influence(&cfg)?.files)
        }
        Command::Render { csv, svg } => {
            harness::render_heatmap(&csv, &svg).with_context(|| format!("rendering {}", csv.display()))?;
            report(&[svg]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<dptail_core::Error>())
                .map(error_kind)
                .unwrap_or("other");
            eprintln!("dptail: error[{kind}]: {e}");
            for c in causes {
                eprintln!("  caused by: {c}");
            }
            ExitCode::from(if kind == "config" || kind == "missing-file" { 2 } else { 1 })
        }
    }
}

fn error_kind(e: &dptail_core::Error) -> &'static str {
    use dptail_core::Error::*;
    match e {
        Config(_) | InvalidArgument(_) | UnreachableNcr(_) | UnequalClassCounts(_) | DimensionMismatch(_) => "config",
        MissingFile(_) => "missing-file",
        Parse { .. } | Csv(_) | Json(_) => "parse",
        Io(_) => "io",
        Diverged { .. } | NonFinite(_) => "numerical",
        Empty { .. } => "empty",
    }
}

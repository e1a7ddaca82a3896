use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splitgp_core::diagnostics::{bound_rhs, epsilon_lambda, BoundConstants};
use splitgp_core::fedsim::Mode;
use splitgp_core::harness::{emit_report, run_experiment, ExperimentConfig, Stages};
use splitgp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "splitgp", version, about = "Two-exit split federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, partition it and train every requested mode.
    Train(RunArgs),
    /// Evaluate saved checkpoints over the ρ list and threshold grid.
    Eval(RunArgs),
    /// Train, evaluate, compute latency figures and write the report.
    Run(RunArgs),
    /// Latency figures, rate-threshold verdicts and sweep curves.
    Latency(RunArgs),
    /// Convergence-bound values over a list of horizons.
    Bound(BoundArgs),
    /// Summarize a completed run directory.
    Report {
        /// Run directory.
        dir: PathBuf,
    },
    /// Print a built-in config as JSON.
    Preset {
        /// One of accuracy, lambda, eth, latency, convergence.
        name: String,
    },
}

#[derive(Args)]
struct Source {
    /// Config file (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config name.
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => Err(Error::InvalidArgument("pass --config or --preset".into())),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; replaces the config's seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict training to these modes (repeatable).
    #[arg(long = "mode")]
    modes: Vec<Mode>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.source.load()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.eval.seeds = vec![s];
        }
        if !self.modes.is_empty() {
            cfg.modes = self.modes.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    source: Source,
    /// λ at which the bound is evaluated.
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    /// Horizons T (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = vec![10, 100, 1_000, 10_000, 100_000, 1_000_000])]
    rounds: Vec<usize>,
}

fn bound_constants(args: &BoundArgs) -> Result<BoundConstants> {
    if args.source.config.is_none() && args.source.preset.is_none() {
        return ExperimentConfig::preset("convergence")?
            .bound
            .ok_or_else(|| Error::InvalidArgument("convergence preset has no bound block".into()));
    }
    args.source
        .load()?
        .bound
        .ok_or_else(|| Error::InvalidArgument("config has no `bound` block".into()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => report_manifest(run_experiment(&a.config()?, None, Stages::TRAIN)?),
        Command::Eval(a) => report_manifest(run_experiment(&a.config()?, None, Stages::EVAL)?),
        Command::Latency(a) => report_manifest(run_experiment(&a.config()?, None, Stages::LATENCY)?),
        Command::Run(a) => {
            let cfg = a.config()?;
            report_manifest(run_experiment(&cfg, None, Stages::ALL)?)?;
            emit_report(&cfg.output_dir)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join("summary.txt")).unwrap_or_default());
            Ok(())
        }
        Command::Bound(a) => {
            let bc = bound_constants(&a)?;
            println!("epsilon({}) = {}", a.lambda, epsilon_lambda(a.lambda, bc.c, bc.grad_bound, bc.smoothness)?);
            println!("rounds,bound_rhs");
            for t in a.rounds {
                println!("{t},{}", bound_rhs(t, &bc, a.lambda)?);
            }
            Ok(())
        }
        Command::Report { dir } => {
            emit_report(&dir)?;
            print!("{}", std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default());
            Ok(())
        }
        Command::Preset { name } => {
            println!("{}", ExperimentConfig::preset(&name)?.to_json());
            Ok(())
        }
    }
}

fn report_manifest(m: splitgp_core::harness::RunManifest) -> Result<()> {
    for s in &m.stages {
        eprintln!("{:<10} {:>8.2}s {}", s.stage, s.seconds, if s.ok { "ok" } else { "failed" });
    }
    eprintln!("{} output files", m.outputs.len());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                Error::Config { .. } | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

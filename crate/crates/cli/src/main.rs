use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use normprop::harness::{emit, run, to_csv, to_json, ExperimentConfig, ExperimentKind, Format};

#[derive(Parser)]
#[command(
    name = "normprop",
    version,
    about = "Signal-propagation experiments for normalization layers at initialization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-block forward variance in residual networks.
    VarianceProfile(Common),
    /// Stable rank of penultimate features across group sizes.
    RankSweep(Common),
    /// Mean pairwise cosine of final features across group sizes.
    CossimSweep(Common),
    /// Layerwise gradient norms and explosion rates.
    GradProfile(Common),
    /// Cosine similarity against gradient explosion per group size.
    Tradeoff(Common),
    /// Initial cosine similarity against training accuracy.
    TrainCorrelate(Common),
    /// Analytic gradients, projector and moment identities.
    GradCheck(Common),
    /// Print the default configuration of an experiment.
    Defaults { experiment: ExperimentKind },
}

#[derive(Args)]
struct Common {
    /// Flat key = value file overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Worker threads; 0 picks the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

fn execute(kind: ExperimentKind, c: Common) -> anyhow::Result<()> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(kind, p)
            .with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::defaults(kind),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    let bundle = run(&cfg)?;
    for d in &bundle.divergences {
        eprintln!(
            "diverged: {} ({}) seed {} during {} at layer {}",
            d.normalizer, d.params, d.seed, d.stage, d.at
        );
    }
    match c.out {
        Some(p) => {
            emit(&bundle, c.format, &p).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!(
            "{}",
            if c.format == Format::Csv {
                to_csv(&bundle)?
            } else {
                to_json(&bundle)?
            }
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::VarianceProfile(c) => execute(ExperimentKind::VarianceProfile, c),
        Command::RankSweep(c) => execute(ExperimentKind::RankSweep, c),
        Command::CossimSweep(c) => execute(ExperimentKind::CossimSweep, c),
        Command::GradProfile(c) => execute(ExperimentKind::GradProfile, c),
        Command::Tradeoff(c) => execute(ExperimentKind::Tradeoff, c),
        Command::TrainCorrelate(c) => execute(ExperimentKind::TrainCorrelate, c),
        Command::GradCheck(c) => execute(ExperimentKind::GradCheck, c),
        Command::Defaults { experiment } => ExperimentConfig::defaults(experiment)
            .to_toml()
            .map(|t| print!("{t}"))
            .map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

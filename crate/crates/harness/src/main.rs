use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xgm_harness::experiments::{run_experiment, RunOptions};
use xgm_harness::{Engine, ExperimentConfig, ExperimentKind};

/// Curriculum vs overparameterisation experiments on the XOR-like Gaussian mixture.
#[derive(Debug, Parser)]
#[command(name = "xgm", version = xgm_harness::VERSION)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment config (flat `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out` or `runs/<kind>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Offset added to every seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Zero wall-clock fields so reruns give byte-identical CSVs.
    #[arg(long, global = true)]
    reproducible: bool,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the order-parameter ODE over the configured grid.
    OdeRun,
    /// Finite-d SGD reference runs with the same schedule and output schema.
    SgdRun,
    /// Controlled four-unit sweep over the initial angle of unit 1.
    Controlled,
    /// Instantaneous rate heatmaps of the free unit.
    Rates,
    /// Any experiment kind, as named by the config.
    Sweep,
    /// Paired runs at sigma and sigma + 0.15 with coverage transition matrices.
    Destab,
}

impl Command {
    fn kind(&self) -> Option<ExperimentKind> {
        match self {
            Command::Controlled => Some(ExperimentKind::ControlledTheta),
            Command::Rates => Some(ExperimentKind::RateHeatmap),
            Command::Destab => Some(ExperimentKind::Destabilisation),
            _ => None,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.global.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let default_kind = cli.command.kind().unwrap_or(ExperimentKind::ProtocolCompare);
    let mut cfg = ExperimentConfig::load(&text, &cli.global.overrides, default_kind)?;
    if let Some(k) = cli.command.kind() {
        if cfg.kind != k {
            bail!("this subcommand runs `{k}` but the config names `{}`", cfg.kind);
        }
    }
    match cli.command {
        Command::OdeRun => cfg.engine = Engine::Ode,
        Command::SgdRun => cfg.engine = Engine::Sgd,
        _ => {}
    }
    if cli.global.seed != 0 {
        cfg.seeds.iter_mut().for_each(|s| *s += cli.global.seed);
        if let Some(s) = cfg.init_seed.as_mut() {
            *s += cli.global.seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load(&cli)?;
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.kind.name()));
    let workers = cli
        .global
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let opts = RunOptions {
        workers,
        reproducible: cli.global.reproducible,
        out: Some(out.clone()),
    };
    let report = run_experiment(&cfg, &opts)?;
    let failed = report.failures();
    eprintln!(
        "{}: {} runs, {} failed, written to {}",
        cfg.kind,
        report.outcomes.len(),
        failed,
        out.display()
    );
    for o in report.outcomes.iter().filter(|o| o.result.is_err()) {
        if let Err(e) = &o.result {
            eprintln!("  {} (seed {}): {e}", o.spec.run_id, o.spec.seed);
        }
    }
    Ok(if failed > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use beamtc::pipeline::{read_results, run_stage, ExperimentConfig, Layout, Stage};
use clap::{Parser, Subcommand};

mod plot;

/// Beam recommendation from a GPS-indexed beam-power database via two-stage
/// tensor completion.
#[derive(Debug, Parser)]
#[command(name = "beamtc", version)]
struct Cli {
    /// Experiment config (TOML). Built-in full-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scene and survey seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for completion and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Write SVG plots after evaluation.
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the scene file.
    SceneGen,
    /// Survey observed positions into measurements.csv.
    Survey,
    /// Complete the measurement tensors.
    Complete,
    /// Write TC and fingerprint recommendations for every position.
    Recommend,
    /// Compute P_pl and SE result tables.
    Evaluate,
    /// Render SVG plots from existing result tables.
    Plot,
    /// Run every stage in order (the default).
    Run,
    /// Print the effective config as TOML.
    Config,
}

/// A failure tagged with the stage it happened in.
struct Failure {
    stage: &'static str,
    error: anyhow::Error,
}

fn at(stage: &'static str) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { stage, error }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn stages(command: Command) -> &'static [Stage] {
    match command {
        Command::SceneGen => &Stage::ALL[0..1],
        Command::Survey => &Stage::ALL[1..2],
        Command::Complete => &Stage::ALL[2..3],
        Command::Recommend => &Stage::ALL[3..4],
        Command::Evaluate => &Stage::ALL[4..5],
        Command::Run => &Stage::ALL,
        Command::Plot | Command::Config => &[],
    }
}

fn execute(cli: &Cli) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli).map_err(at("config"))?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")
            .map_err(at("config"))?;
    }
    let command = cli.command.unwrap_or(Command::Run);
    if let Command::Config = command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }

    let layout = Layout::new(&cfg.output.dir);
    std::fs::create_dir_all(layout.root())
        .with_context(|| format!("creating {}", layout.root().display()))
        .map_err(at("config"))?;
    for &stage in stages(command) {
        eprintln!("{stage}");
        run_stage(stage, &cfg, &layout).map_err(|e| Failure { stage: e.stage.name(), error: e.source.into() })?;
    }

    let wants_plot = matches!(command, Command::Plot) || (cli.plot && stages(command).contains(&Stage::Evaluate));
    if wants_plot {
        let results = read_results(&layout).map_err(|e| at("plot")(e.into()))?;
        let files = plot::render(&cfg, &results, layout.root()).map_err(at("plot"))?;
        for f in files {
            eprintln!("wrote {}", f.display());
        }
    }
    if stages(command).contains(&Stage::Evaluate) {
        println!("results in {}", layout.root().display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: stage {} failed: {:#}", f.stage, f.error);
            ExitCode::FAILURE
        }
    }
}

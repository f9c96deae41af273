//! Reproducible experiments on top of `factorformer`: simulation, baselines,
//! training, evaluation, interpretation and the coincident-index application.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use factorformer::Result;

use commands::Context;
use config::{ExperimentConfig, RawConfig};

#[derive(Debug, Parser)]
#[command(name = "factorformer", version, about = "Factor extraction experiments")]
pub struct Cli {
    /// Configuration file (`key = value` lines, `include = ...` for presets).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Simulation seeds (overrides `seeds`); repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Worker threads for seeds and runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Preset to include after the config file; repeatable.
    #[arg(long, global = true)]
    pub preset: Vec<String>,
    /// `key=value` override applied last; repeatable.
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
    /// Permit network access (only `fetch` uses it).
    #[arg(long, global = true)]
    pub allow_network: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate datasets for every seed.
    Simulate,
    /// Kalman, Kalman-max, particle-filter and mean-of-data factor estimates.
    Baselines,
    /// Train the transformer ensembles for every seed and lambda.
    Train,
    /// Metrics per ensemble and the seed-averaged results table.
    Evaluate,
    /// Attention, residual-stream and projection files.
    Interpret,
    /// simulate, baselines, train, evaluate and interpret in sequence.
    All,
    /// Coincident index from macro series (empirical mode).
    Coincident,
    /// Download a data file.
    Fetch {
        url: String,
        #[arg(long)]
        dest: PathBuf,
    },
    /// List the built-in presets.
    Presets,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Baselines => "baselines",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Interpret => "interpret",
            Command::All => "all",
            Command::Coincident => "coincident",
            Command::Fetch { .. } => "fetch",
            Command::Presets => "presets",
        }
    }
}

/// Configuration from the file, presets, `--set`, `--seed` and `--out`,
/// in that order of precedence (last wins).
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let (mut raw, base) = match &cli.config {
        Some(p) => (RawConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RawConfig::default(), PathBuf::new()),
    };
    for p in &cli.preset {
        raw.include(p, Path::new("."), 0)?;
    }
    for s in &cli.set {
        raw.set(s)?;
    }
    if !cli.seed.is_empty() {
        let seeds: Vec<String> = cli.seed.iter().map(u64::to_string).collect();
        raw.values.insert("seeds".into(), seeds.join(","));
    }
    let mut cfg = ExperimentConfig::from_raw(raw, &base)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Executes a parsed command line and returns the paths it produced.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    if let Command::Presets = cli.command {
        return Ok(config::preset_names().into_iter().map(PathBuf::from).collect());
    }
    let ctx = Context { cfg: resolve_config(cli)?, jobs: cli.jobs.max(1), allow_network: cli.allow_network };
    match &cli.command {
        Command::Simulate => commands::cmd_simulate(&ctx),
        Command::Baselines => commands::cmd_baselines(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Evaluate => commands::cmd_evaluate(&ctx),
        Command::Interpret => commands::cmd_interpret(&ctx),
        Command::All => {
            let mut out = commands::cmd_simulate(&ctx)?;
            out.extend(commands::cmd_baselines(&ctx)?);
            out.extend(commands::cmd_train(&ctx)?);
            out.extend(commands::cmd_evaluate(&ctx)?);
            out.extend(commands::cmd_interpret(&ctx)?);
            Ok(out)
        }
        Command::Coincident => commands::cmd_coincident(&ctx),
        Command::Fetch { url, dest } => commands::cmd_fetch(&ctx, url, dest),
        Command::Presets => unreachable!("handled above"),
    }
}

//! `usd`: run unbalanced Sobolev descent from a JSON configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::ColorPaths;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "usd", version, about = "Unbalanced Sobolev descent between point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides run.output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Descent between two synthetic shapes.
    Synth(Common),
    /// Recolor an image with the palette of another.
    ColorTransfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Output PNG; relative paths land in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Find the descent step halfway (in MMD) between source and target.
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// Reuse snapshots already in the output directory instead of running.
        #[arg(long)]
        replay: bool,
    },
    /// Numerical self-checks.
    Check(Common),
}

/// Caps rayon's pool at `USD_THREADS` when set.
fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("USD_THREADS") {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .with_context(|| format!("USD_THREADS must be a positive integer, got {value:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Synth(common) => {
            let (cfg, out) = load(&common)?;
            commands::synth(&cfg, &out)?;
        }
        Command::ColorTransfer {
            common,
            source,
            target,
            output,
        } => {
            let (cfg, out) = load(&common)?;
            commands::color_transfer(&cfg, ColorPaths { source, target, output }, &out)?;
        }
        Command::Interpolate { common, replay } => {
            let (cfg, out) = load(&common)?;
            commands::interpolate(&cfg, &out, replay)?;
        }
        Command::Check(common) => {
            let (cfg, _) = load(&common)?;
            return commands::check(&cfg);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

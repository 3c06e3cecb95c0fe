use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use usd_core::data::{
    image_to_particles, load_point_cloud, load_rgb8, particles_to_image, sample_shape, save_point_cloud,
};
use usd_core::descent::{find_midpoint_in, run_kernel_usd, DescentConfig, DescentTrace, ReactionMode, Snapshot};
use usd_core::neural_critic::{load_checkpoint, run_neural_usd, save_checkpoint, NeuralConfig};
use usd_core::rng::{seeded_rng, sub_seed};
use usd_core::selfcheck::run_self_checks;
use usd_core::{FeatureMap, WeightedParticles};

use crate::config::{Engine, Mode, RunConfig};

type Particles = WeightedParticles<f64>;

const SNAPSHOT_DIR: &str = "snapshots";

fn bandwidth(explicit: Option<f64>, d: usize) -> f64 {
    explicit.unwrap_or((d as f64).sqrt())
}

/// Evaluation map: tied to the data seed so runs that differ only in descent
/// settings are measured identically.
fn evaluation_map(cfg: &RunConfig, d: usize) -> Result<FeatureMap<f64>> {
    Ok(FeatureMap::rff(
        d,
        cfg.eval.n_features,
        bandwidth(cfg.eval.bandwidth, d),
        sub_seed(cfg.run.data_seed, 100),
    )?)
}

fn sample_pair(cfg: &RunConfig) -> Result<(Particles, Particles)> {
    let source = sample_shape(&cfg.source_shape(), &mut seeded_rng(sub_seed(cfg.run.data_seed, 1)))
        .context("sampling source")?;
    let target = sample_shape(&cfg.target_shape(), &mut seeded_rng(sub_seed(cfg.run.data_seed, 2)))
        .context("sampling target")?;
    if source.dim() != target.dim() {
        bail!("source has dimension {} but target has {}", source.dim(), target.dim());
    }
    Ok((source, target))
}

struct RunOutput {
    trace: DescentTrace<f64>,
    /// Set when a run failed after recording part of its trace.
    error: Option<anyhow::Error>,
}

/// Runs the configured engine. Partial traces of failed runs are kept.
fn run_engine(
    cfg: &RunConfig,
    target: &Particles,
    source: &Particles,
    fm_eval: &FeatureMap<f64>,
    snapshot_every: usize,
    out_dir: &Path,
) -> Result<RunOutput> {
    let d = source.dim();
    let mode: ReactionMode = cfg.run.mode.into();
    let gamma = cfg.gamma()?;
    let result = match cfg.run.engine {
        Engine::Kernel => {
            let fm = FeatureMap::rff(
                d,
                cfg.kernel.n_features,
                bandwidth(cfg.kernel.bandwidth, d),
                sub_seed(cfg.run.descent_seed, 1),
            )?;
            let dc = DescentConfig {
                alpha: cfg.alpha,
                lambda: cfg.kernel.lambda,
                gamma,
                step_size: cfg.lr_q,
                reaction_rate: cfg.tau,
                n_steps: cfg.t,
                reaction_mode: mode,
                seed: sub_seed(cfg.run.descent_seed, 2),
                snapshot_every,
                sequential_birth_death_mean: cfg.run.sequential_birth_death_mean,
            };
            run_kernel_usd(target, source, &fm, fm_eval, &dc)
        }
        Engine::Neural => {
            let nc = NeuralConfig {
                hidden: cfg.n_layers.clone(),
                activation: cfg.activation()?,
                zero_init: cfg.neural.zero_init,
                alpha: cfg.alpha,
                gamma,
                step_size: cfg.lr_q,
                reaction_rate: cfg.tau,
                n_steps: cfg.t,
                critic_steps_startup: cfg.n_c_startup,
                critic_steps: cfg.n_c,
                critic_lr: cfg.lr_d,
                batch_size: cfg.batch_size,
                weight_decay: cfg.wdecay,
                lambda_aug_init: cfg.lambda_aug_init,
                rho: cfg.rho,
                reset_optimizer: cfg.neural.reset_optimizer,
                dropout: cfg.dropout(),
                seed: cfg.run.descent_seed,
                snapshot_every,
                sequential_birth_death_mean: cfg.run.sequential_birth_death_mean,
            };
            let initial = match &cfg.neural.checkpoint {
                Some(path) => Some(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?),
                None => None,
            };
            run_neural_usd(target, source, &nc, mode, fm_eval, initial).map(|(trace, critic)| {
                if let Err(e) = save_checkpoint(&critic, &out_dir.join("critic.txt")) {
                    log::warn!("could not save critic checkpoint: {e}");
                }
                trace
            })
        }
    };
    Ok(match result {
        Ok(trace) => RunOutput { trace, error: None },
        Err(failure) => RunOutput {
            trace: failure.trace,
            error: Some(failure.error.into()),
        },
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    engine: Engine,
    mode: Mode,
    steps: usize,
    initial_mmd2: Option<f64>,
    final_mmd2: Option<f64>,
    final_particles: Option<usize>,
    final_total_mass: Option<f64>,
    wall_time_s: f64,
}

fn write_outputs(
    command: &str,
    cfg: &RunConfig,
    out_dir: &Path,
    trace: &DescentTrace<f64>,
    started: Instant,
) -> Result<()> {
    trace.save_csv(&out_dir.join("trace.csv"))?;
    if !trace.snapshots.is_empty() {
        let dir = out_dir.join(SNAPSHOT_DIR);
        fs::create_dir_all(&dir)?;
        for snap in &trace.snapshots {
            save_point_cloud(&snap.particles, &dir.join(snapshot_name(snap.step)))?;
        }
    }
    let summary = Summary {
        command,
        engine: cfg.run.engine,
        mode: cfg.run.mode,
        steps: trace.records.len().saturating_sub(1),
        initial_mmd2: trace.initial().map(|r| r.mmd2),
        final_mmd2: trace.last().map(|r| r.mmd2),
        final_particles: trace.last().map(|r| r.n_particles),
        final_total_mass: trace.last().map(|r| r.total_mass),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(out_dir.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn snapshot_name(step: usize) -> String {
    format!("step_{step:06}.csv")
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))
}

fn report(trace: &DescentTrace<f64>) {
    if let (Some(first), Some(last)) = (trace.initial(), trace.last()) {
        println!(
            "steps {}  mmd2 {:.6e} -> {:.6e}  particles {}  mass {:.6}",
            last.step, first.mmd2, last.mmd2, last.n_particles, last.total_mass
        );
    }
}

fn finish(run: RunOutput) -> Result<DescentTrace<f64>> {
    match run.error {
        None => Ok(run.trace),
        Some(e) => Err(e.context(format!("descent failed after {} recorded steps", run.trace.records.len()))),
    }
}

pub fn synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let started = Instant::now();
    cfg.validate()?;
    prepare_out(out_dir)?;
    let (source, target) = sample_pair(cfg)?;
    let fm_eval = evaluation_map(cfg, source.dim())?;
    info!("synth: {} source, {} target particles in {} dimensions", source.len(), target.len(), source.dim());
    let run = run_engine(cfg, &target, &source, &fm_eval, cfg.run.snapshot_every, out_dir)?;
    write_outputs("synth", cfg, out_dir, &run.trace, started)?;
    let trace = finish(run)?;
    report(&trace);
    Ok(())
}

pub struct ColorPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn color_transfer(cfg: &RunConfig, paths: ColorPaths, out_dir: &Path) -> Result<()> {
    let started = Instant::now();
    cfg.validate()?;
    if cfg.run.mode == Mode::BirthDeath {
        bail!("birth_death reorders particles, so pixels cannot be recovered; use weighted or none");
    }
    let section = cfg.color_transfer.as_ref();
    let pick = |flag: Option<PathBuf>, from_cfg: Option<PathBuf>, what: &str| {
        flag.or(from_cfg)
            .with_context(|| format!("no {what} image: pass --{what} or set color_transfer.{what}"))
    };
    let source_path = pick(paths.source, section.map(|s| s.source.clone()), "source")?;
    let target_path = pick(paths.target, section.map(|s| s.target.clone()), "target")?;
    let output = paths
        .output
        .or(section.map(|s| s.output.clone()))
        .unwrap_or_else(|| PathBuf::from("recolored.png"));
    let output = if output.is_relative() { out_dir.join(output) } else { output };

    prepare_out(out_dir)?;
    let (width, height) = load_rgb8(&source_path)?.dimensions();
    let source = image_to_particles::<f64>(&source_path)?;
    let target = image_to_particles::<f64>(&target_path)?;
    let fm_eval = evaluation_map(cfg, 3)?;
    // the final snapshot carries the recolored pixels
    let every = if cfg.run.snapshot_every > 0 { cfg.run.snapshot_every } else { cfg.t.max(1) };
    let run = run_engine(cfg, &target, &source, &fm_eval, every, out_dir)?;
    let mut trace = run.trace;
    let error = run.error;
    if let Some(last) = trace.final_snapshot() {
        particles_to_image(&last.particles, width, height, &output)?;
    }
    if cfg.run.snapshot_every == 0 {
        trace.snapshots.clear();
    }
    write_outputs("color-transfer", cfg, out_dir, &trace, started)?;
    let trace = finish(RunOutput { trace, error })?;
    report(&trace);
    println!("wrote {}", output.display());
    Ok(())
}

fn load_snapshots(out_dir: &Path) -> Result<Vec<Snapshot<f64>>> {
    let dir = out_dir.join(SNAPSHOT_DIR);
    let mut snaps = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("no snapshots in {}", dir.display()))? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".csv"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            snaps.push(Snapshot {
                step,
                particles: load_point_cloud(&path)?,
            });
        }
    }
    snaps.sort_by_key(|s| s.step);
    if snaps.is_empty() {
        bail!("no snapshot files in {}", dir.display());
    }
    Ok(snaps)
}

#[derive(Serialize)]
struct MidpointReport {
    step: usize,
    mmd_to_source: f64,
    mmd_to_target: f64,
    gap: f64,
    mmd_source_target: f64,
}

pub fn interpolate(cfg: &RunConfig, out_dir: &Path, replay: bool) -> Result<()> {
    let started = Instant::now();
    cfg.validate()?;
    if cfg.run.snapshot_every == 0 {
        bail!("interpolate needs snapshots: set run.snapshot_every > 0");
    }
    prepare_out(out_dir)?;
    let (source, target) = sample_pair(cfg)?;
    let fm_eval = evaluation_map(cfg, source.dim())?;
    let snapshots = if replay {
        load_snapshots(out_dir)?
    } else {
        let run = run_engine(cfg, &target, &source, &fm_eval, cfg.run.snapshot_every, out_dir)?;
        write_outputs("interpolate", cfg, out_dir, &run.trace, started)?;
        finish(run)?.snapshots
    };
    let mid = find_midpoint_in(&snapshots, &source, &target, &fm_eval)?;
    let particles = &snapshots[mid.snapshot_index].particles;
    save_point_cloud(particles, &out_dir.join("midpoint.csv"))?;
    let report = MidpointReport {
        step: mid.step,
        mmd_to_source: mid.mmd_to_source,
        mmd_to_target: mid.mmd_to_target,
        gap: mid.gap(),
        mmd_source_target: usd_core::mmd::mmd2(&source, &target, &fm_eval)?.max(0.0).sqrt(),
    };
    fs::write(out_dir.join("midpoint.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "midpoint step {}  MMD to source {:.6e}  MMD to target {:.6e}  gap {:.3e}",
        report.step, report.mmd_to_source, report.mmd_to_target, report.gap
    );
    Ok(())
}

/// Returns whether every check passed.
pub fn check(cfg: &RunConfig) -> Result<bool> {
    let outcomes = run_self_checks(cfg.run.descent_seed)?;
    for o in &outcomes {
        println!("{o}");
    }
    Ok(outcomes.iter().all(|o| o.passed()))
}

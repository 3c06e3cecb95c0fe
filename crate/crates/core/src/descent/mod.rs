//! Discrete-time unbalanced Sobolev descent.
//!
//! Each step solves the critic between the target and the current particles,
//! then
//!
//! * moves every particle by `ε ∇u(x)` (advection), and
//! * updates masses (reaction), either by reweighing
//!   `a_j ← log w_j + τ (u(x_j) − γ m)` in log domain, or by a birth-death
//!   process with duplication/kill probabilities `1 − exp(−ατ|β_j|)`.
//!
//! Note the two reaction modes use different rates: reweighing uses `τ`
//! alone, birth-death uses `α τ`. Both follow their respective update rules
//! literally.

mod reaction;
mod trace;

use std::fmt;

use log::debug;
use nalgebra::DVector;
use rayon::prelude::*;

use crate::embeddings::{mean_embedding, Gamma, WeightedParticles};
use crate::error::{Result, UsdError};
use crate::features::FeatureMap;
use crate::rng::seeded_rng;
use crate::scalar::Real;
use crate::sobolev_fisher::{solve_critic_against, KernelCritic, SfParams};

pub use reaction::{react_birth_death, react_weights, BirthDeathReport, WeightReport, LOG_WEIGHT_CLAMP};
pub use trace::{find_midpoint, find_midpoint_in, DescentTrace, Midpoint, Snapshot, TraceRecord, TRACE_HEADER};

/// A scalar field with a spatial gradient that can drive the descent.
///
/// The batch methods take row-major `n × d` positions and keep particle
/// order; their defaults evaluate point by point in parallel.
pub trait Critic<T: Real>: Sync {
    fn value(&self, x: &[T]) -> Result<T>;
    fn grad(&self, x: &[T]) -> Result<DVector<T>>;

    fn values(&self, positions: &[T], dim: usize) -> Result<Vec<T>> {
        positions.par_chunks(dim).map(|x| self.value(x)).collect()
    }

    /// Gradients at every position, row-major `n × d`.
    fn grads(&self, positions: &[T], dim: usize) -> Result<Vec<T>> {
        let rows: Vec<DVector<T>> = positions.par_chunks(dim).map(|x| self.grad(x)).collect::<Result<_>>()?;
        Ok(rows.iter().flat_map(|g| g.iter().copied()).collect())
    }
}

impl<T: Real> Critic<T> for KernelCritic<'_, T> {
    fn value(&self, x: &[T]) -> Result<T> {
        KernelCritic::value(self, x)
    }
    fn grad(&self, x: &[T]) -> Result<DVector<T>> {
        KernelCritic::grad(self, x)
    }
    fn values(&self, positions: &[T], _dim: usize) -> Result<Vec<T>> {
        Ok(self.feature_map().linear_values(positions, self.coeffs())?.data.into())
    }
    fn grads(&self, positions: &[T], _dim: usize) -> Result<Vec<T>> {
        let g = self.feature_map().linear_gradients(positions, self.coeffs())?;
        // column-major n × d to row-major
        Ok(g.transpose().data.into())
    }
}

/// How particle masses evolve after advection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReactionMode {
    /// Log-domain reweighing with rate `τ`.
    Weighted,
    /// Stochastic duplication and killing with rate `α τ`.
    BirthDeath,
    /// Advection only.
    None,
}

impl std::str::FromStr for ReactionMode {
    type Err = UsdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "birth_death" => Ok(Self::BirthDeath),
            "none" => Ok(Self::None),
            other => Err(UsdError::InvalidParameter(format!("unknown reaction mode {other:?}"))),
        }
    }
}

impl fmt::Display for ReactionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::BirthDeath => "birth_death",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig<T: Real> {
    pub alpha: T,
    pub lambda: T,
    pub gamma: Gamma,
    /// Advection step `ε`.
    pub step_size: T,
    /// Reaction rate `τ`; ignored when `reaction_mode` is `None`.
    pub reaction_rate: T,
    pub n_steps: usize,
    pub reaction_mode: ReactionMode,
    pub seed: u64,
    /// Record particle snapshots every this many steps (0 disables).
    pub snapshot_every: usize,
    /// Birth-death only: compute the mean critic value as the running mix of
    /// updated and stale positions instead of post-advection positions.
    pub sequential_birth_death_mean: bool,
}

impl<T: Real> DescentConfig<T> {
    pub fn sf_params(&self) -> SfParams<T> {
        SfParams {
            alpha: self.alpha,
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sf_params().validate()?;
        if !(self.step_size.is_finite_value() && self.step_size > T::zero()) {
            return Err(UsdError::InvalidParameter(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.reaction_mode != ReactionMode::None
            && !(self.reaction_rate.is_finite_value() && self.reaction_rate >= T::zero())
        {
            return Err(UsdError::InvalidParameter(format!(
                "reaction rate must be >= 0, got {}",
                self.reaction_rate
            )));
        }
        if self.reaction_mode == ReactionMode::BirthDeath
            && !(self.alpha > T::zero() && self.reaction_rate > T::zero())
        {
            return Err(UsdError::InvalidParameter(
                "birth-death needs alpha > 0 and tau > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Particle positions with log-domain masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentState<T: Real> {
    positions: Vec<T>,
    log_weights: Vec<T>,
    dim: usize,
    pub step: usize,
}

impl<T: Real> DescentState<T> {
    /// Starts from `particles`; every weight must be strictly positive.
    pub fn from_particles(particles: &WeightedParticles<T>) -> Result<Self> {
        if particles.weights().iter().any(|w| *w <= T::zero()) {
            return Err(UsdError::InvalidParticles(
                "descent needs strictly positive weights".into(),
            ));
        }
        Ok(Self {
            positions: particles.points().to_vec(),
            log_weights: particles.weights().iter().map(|w| w.ln()).collect(),
            dim: particles.dim(),
            step: 0,
        })
    }

    /// Same positions with uniform weights `1/n`.
    pub fn uniform(particles: &WeightedParticles<T>) -> Self {
        let n = particles.len();
        Self {
            positions: particles.points().to_vec(),
            log_weights: vec![-T::from_count(n).ln(); n],
            dim: particles.dim(),
            step: 0,
        }
    }

    pub(crate) fn from_parts(positions: Vec<T>, log_weights: Vec<T>, dim: usize, step: usize) -> Self {
        Self {
            positions,
            log_weights,
            dim,
            step,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &[T] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[T] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<T> {
        self.log_weights.iter().map(|a| a.exp()).collect()
    }

    pub fn total_mass(&self) -> T {
        self.log_weights.iter().fold(T::zero(), |acc, a| acc + a.exp())
    }

    /// Materializes linear weights for the embedding routines.
    pub fn particles(&self) -> Result<WeightedParticles<T>> {
        WeightedParticles::new(self.positions.clone(), self.weights(), self.dim)
    }
}

/// Evaluates `critic` at every particle position, in particle order.
pub fn critic_values<T: Real, C: Critic<T> + ?Sized>(critic: &C, positions: &[T], dim: usize) -> Result<Vec<T>> {
    critic.values(positions, dim)
}

/// Moves every particle by `ε ∇u(x)`. Weights are untouched.
pub fn advect<T: Real, C: Critic<T> + ?Sized>(state: &DescentState<T>, critic: &C, step_size: T) -> Result<DescentState<T>> {
    if !(step_size.is_finite_value() && step_size > T::zero()) {
        return Err(UsdError::InvalidParameter(format!("step size must be > 0, got {step_size}")));
    }
    let dim = state.dim;
    let grads = critic.grads(&state.positions, dim)?;
    if grads.iter().any(|v| !v.is_finite_value()) {
        return Err(UsdError::NonFinite("critic gradient during advection".into()));
    }
    let positions = state
        .positions
        .iter()
        .zip(&grads)
        .map(|(x, g)| *x + step_size * *g)
        .collect();
    Ok(DescentState {
        positions,
        log_weights: state.log_weights.clone(),
        dim,
        step: state.step,
    })
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure<T: Real> {
    pub trace: DescentTrace<T>,
    pub error: UsdError,
}

impl<T: Real> fmt::Display for RunFailure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "descent failed after {} recorded steps: {}", self.trace.records.len(), self.error)
    }
}

impl<T: Real> std::error::Error for RunFailure<T> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type RunResult<T> = std::result::Result<DescentTrace<T>, RunFailure<T>>;

/// Runs `cfg.n_steps` steps of kernel unbalanced Sobolev descent.
///
/// The trace holds one record per step including step 0, with the MMD²
/// measured in `fm_eval`. In birth-death mode the source starts from uniform
/// weights.
pub fn run_kernel_usd<T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    fm_descent: &FeatureMap<T>,
    fm_eval: &FeatureMap<T>,
    cfg: &DescentConfig<T>,
) -> RunResult<T> {
    let mut trace = DescentTrace::new();
    let fail = |trace: DescentTrace<T>, error| RunFailure { trace, error };
    if let Err(e) = cfg.validate() {
        return Err(fail(trace, e));
    }
    let state = match cfg.reaction_mode {
        ReactionMode::BirthDeath => Ok(DescentState::uniform(source)),
        _ => DescentState::from_particles(source),
    };
    let mut state = match state {
        Ok(s) => s,
        Err(e) => return Err(fail(trace, e)),
    };
    let mut rng = seeded_rng(cfg.seed);
    let params = cfg.sf_params();
    let cached = mean_embedding(target, fm_descent).and_then(|d| Ok((d, mean_embedding(target, fm_eval)?)));
    let (target_descent, target_eval) = match cached {
        Ok(c) => c,
        Err(e) => return Err(fail(trace, e)),
    };

    for step in 0..=cfg.n_steps {
        let outcome = (|| -> Result<Option<DescentState<T>>> {
            let particles = state.particles()?;
            let (critic, delta) = solve_critic_against(&target_descent, &particles, fm_descent, params)?;
            trace.records.push(TraceRecord {
                step,
                mmd2: (&target_eval - mean_embedding(&particles, fm_eval)?).norm_squared(),
                sf2: critic.sf2(),
                total_mass: particles.total_mass(),
                n_particles: particles.len(),
                mmd2_descent: delta.norm_squared(),
            });
            if cfg.snapshot_every > 0 && (step % cfg.snapshot_every == 0 || step == cfg.n_steps) {
                trace.snapshots.push(Snapshot { step, particles });
            }
            if step == cfg.n_steps {
                return Ok(None);
            }
            let next = match cfg.reaction_mode {
                ReactionMode::None => advect(&state, &critic, cfg.step_size)?,
                ReactionMode::Weighted => {
                    // reaction reads pre-advection positions, advection leaves weights alone
                    let (reacted, _) = react_weights(&state, &critic, cfg.reaction_rate, cfg.gamma)?;
                    advect(&reacted, &critic, cfg.step_size)?
                }
                ReactionMode::BirthDeath => {
                    let moved = advect(&state, &critic, cfg.step_size)?;
                    let previous = cfg.sequential_birth_death_mean.then_some(&state);
                    let (reacted, report) = react_birth_death(
                        &moved,
                        &critic,
                        cfg.alpha,
                        cfg.reaction_rate,
                        cfg.gamma,
                        &mut rng,
                        previous,
                    )?;
                    debug!("step {step}: born {}, killed {}", report.born, report.killed);
                    reacted
                }
            };
            Ok(Some(next))
        })();
        match outcome {
            Ok(Some(mut next)) => {
                next.step = step + 1;
                state = next;
            }
            Ok(None) => break,
            Err(error) => return Err(fail(trace, error)),
        }
    }
    Ok(trace)
}

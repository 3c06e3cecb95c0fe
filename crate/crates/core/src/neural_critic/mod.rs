//! Neural critic trained by an augmented Lagrangian, and the descent loops
//! that use it.
//!
//! Between particle updates the critic is warm-started from its previous
//! parameters and takes a few adaptive-moment ascent steps on
//! [`alm_objective`]. The particles then move exactly as in the kernel
//! descent, with the network's value and input gradient standing in for the
//! closed-form critic.

mod alm;
mod checkpoint;
mod network;
mod optimizer;

use log::debug;
use nalgebra::DVector;
use rand::seq::index::sample;

use crate::descent::{
    advect, react_birth_death, react_weights, Critic, DescentState, DescentTrace, ReactionMode, RunFailure,
    RunResult, Snapshot, TraceRecord,
};
use crate::embeddings::{mean_embedding, Gamma, WeightedParticles};
use crate::error::{Result, UsdError};
use crate::features::FeatureMap;
use crate::rng::{seeded_rng, sub_seed, UsdRng};
use crate::scalar::Real;

pub use alm::{alm_objective, alm_param_grad, AlmCoefficients, AlmGrad, AlmParts};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{Activation, Dropout, NetParams, NeuralCritic};
pub use optimizer::AmsGrad;

/// Objective magnitude beyond which a critic update is considered diverged.
pub const DIVERGENCE_BOUND: f64 = 1e8;

impl<T: Real> Critic<T> for NeuralCritic<T> {
    fn value(&self, x: &[T]) -> Result<T> {
        self.forward(x)
    }
    fn grad(&self, x: &[T]) -> Result<DVector<T>> {
        self.input_grad(x)
    }
    fn values(&self, positions: &[T], _dim: usize) -> Result<Vec<T>> {
        self.forward_batch_par(positions)
    }
    fn grads(&self, positions: &[T], _dim: usize) -> Result<Vec<T>> {
        self.input_grad_batch_par(positions)
    }
}

/// Multiplier, penalty weight and optimizer moments carried across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AlmState<T: Real> {
    pub lambda_aug: T,
    pub rho: T,
    pub optimizer: AmsGrad<T>,
}

impl<T: Real> AlmState<T> {
    /// `rho = 0` is accepted and freezes the multiplier.
    pub fn new(lambda_aug: T, rho: T) -> Result<Self> {
        if !lambda_aug.is_finite_value() {
            return Err(UsdError::NonFinite("initial multiplier".into()));
        }
        if !(rho.is_finite_value() && rho >= T::zero()) {
            return Err(UsdError::InvalidParameter(format!("rho must be >= 0, got {rho}")));
        }
        Ok(Self {
            lambda_aug,
            rho,
            optimizer: AmsGrad::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticUpdateConfig<T: Real> {
    /// Number of ascent steps `n_c`.
    pub n_steps: usize,
    pub learning_rate: T,
    pub alpha: T,
    pub gamma: Gamma,
    /// Mini-batch size per side; 0 or anything `>= n` uses the full set.
    pub batch_size: usize,
    pub weight_decay: T,
    pub dropout: Option<Dropout>,
}

/// Per-step diagnostics, recorded before each parameter step.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport<T: Real> {
    pub objectives: Vec<T>,
    pub omegas: Vec<T>,
    pub lambdas: Vec<T>,
}

impl<T: Real> Default for UpdateReport<T> {
    fn default() -> Self {
        Self {
            objectives: Vec::new(),
            omegas: Vec::new(),
            lambdas: Vec::new(),
        }
    }
}

/// Draws `b` points without replacement and rescales their weights by
/// `n/b`, so weighted sums stay unbiased.
fn mini_batch<T: Real>(set: &WeightedParticles<T>, b: usize, rng: &mut UsdRng) -> Result<WeightedParticles<T>> {
    let n = set.len();
    if b == 0 || b >= n {
        return Ok(set.clone());
    }
    let scale = T::from_count(n) / T::from_count(b);
    let idx = sample(rng, n, b);
    let mut points = Vec::with_capacity(b * set.dim());
    let mut weights = Vec::with_capacity(b);
    for i in idx.iter() {
        points.extend_from_slice(set.point(i));
        weights.push(set.weights()[i] * scale);
    }
    WeightedParticles::new(points, weights, set.dim())
}

/// Runs `cfg.n_steps` ascent steps on the critic, updating the multiplier by
/// `λ ← λ − ρ (1 − Ω̂)` after each one.
pub fn critic_update<T: Real>(
    critic: &mut NeuralCritic<T>,
    state: &mut AlmState<T>,
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    cfg: &CriticUpdateConfig<T>,
    rng: &mut UsdRng,
) -> Result<UpdateReport<T>> {
    if !(cfg.learning_rate.is_finite_value() && cfg.learning_rate > T::zero()) {
        return Err(UsdError::InvalidParameter(format!(
            "critic learning rate must be > 0, got {}",
            cfg.learning_rate
        )));
    }
    if let Some(d) = cfg.dropout {
        if !(0.0..1.0).contains(&d.p) {
            return Err(UsdError::InvalidParameter(format!("dropout p must be in [0, 1), got {}", d.p)));
        }
    }
    let mut report = UpdateReport::default();
    for _ in 0..cfg.n_steps {
        let t_batch = mini_batch(target, cfg.batch_size, rng)?;
        let s_batch = mini_batch(source, cfg.batch_size, rng)?;
        let masks = cfg.dropout.map(|d| {
            (
                critic.dropout_masks(d, t_batch.len(), rng),
                critic.dropout_masks(d, s_batch.len(), rng),
            )
        });
        let coef = AlmCoefficients {
            lambda_aug: state.lambda_aug,
            rho: state.rho,
            alpha: cfg.alpha,
            gamma: cfg.gamma,
        };
        let grad = alm::alm_param_grad_masked(
            critic,
            &t_batch,
            &s_batch,
            &coef,
            masks.as_ref().map(|m| m.0.as_slice()),
            masks.as_ref().map(|m| m.1.as_slice()),
        )?;
        let objective = grad.parts.objective;
        if objective.abs() > T::lit(DIVERGENCE_BOUND) {
            return Err(UsdError::Diverged(objective.to_f64_lossy()));
        }
        report.objectives.push(objective);
        report.omegas.push(grad.parts.omega());
        report.lambdas.push(state.lambda_aug);

        let mut flat = critic.params().to_flat();
        state
            .optimizer
            .ascent_step(&mut flat, &grad.params.to_flat(), cfg.learning_rate, cfg.weight_decay);
        critic.params_mut().set_flat(&flat)?;
        if !critic.params().is_finite() || !state.optimizer.moments_finite() {
            return Err(UsdError::NonFinite("critic parameters after update".into()));
        }
        state.lambda_aug -= state.rho * grad.g_lambda;
    }
    Ok(report)
}

/// Settings for a neural descent run. Defaults follow the synthetic
/// experiment listing, with the smooth activation.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralConfig<T: Real> {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Start from `f ≡ 0` instead of a random network.
    pub zero_init: bool,
    pub alpha: T,
    pub gamma: Gamma,
    /// Particle learning rate `ε` (`lrQ`).
    pub step_size: T,
    /// Reaction rate `τ`.
    pub reaction_rate: T,
    /// Number of descent steps `L` (`T` in the listing).
    pub n_steps: usize,
    pub critic_steps_startup: usize,
    pub critic_steps: usize,
    /// Critic learning rate `η` (`lrD`).
    pub critic_lr: T,
    pub batch_size: usize,
    pub weight_decay: T,
    pub lambda_aug_init: T,
    pub rho: T,
    /// Clear optimizer moments before every critic update after the first.
    pub reset_optimizer: bool,
    pub dropout: Option<Dropout>,
    pub seed: u64,
    pub snapshot_every: usize,
    pub sequential_birth_death_mean: bool,
}

impl<T: Real> Default for NeuralConfig<T> {
    fn default() -> Self {
        Self {
            hidden: vec![64, 1024, 64],
            activation: Activation::Tanh,
            zero_init: false,
            alpha: T::lit(0.6),
            gamma: Gamma::Balanced,
            step_size: T::lit(1e-4),
            reaction_rate: T::lit(1e-3),
            n_steps: 800,
            critic_steps_startup: 200,
            critic_steps: 20,
            critic_lr: T::lit(1e-4),
            batch_size: 512,
            weight_decay: T::lit(1e-5),
            lambda_aug_init: T::lit(1e-5),
            rho: T::lit(1e-6),
            reset_optimizer: true,
            dropout: None,
            seed: 0,
            snapshot_every: 0,
            sequential_birth_death_mean: false,
        }
    }
}

impl<T: Real> NeuralConfig<T> {
    pub fn validate(&self, mode: ReactionMode) -> Result<()> {
        let positive = |v: T| v.is_finite_value() && v > T::zero();
        if !(self.alpha.is_finite_value() && self.alpha >= T::zero()) {
            return Err(UsdError::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !positive(self.step_size) {
            return Err(UsdError::InvalidParameter(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !positive(self.critic_lr) {
            return Err(UsdError::InvalidParameter(format!(
                "critic learning rate must be > 0, got {}",
                self.critic_lr
            )));
        }
        if !(self.reaction_rate.is_finite_value() && self.reaction_rate >= T::zero()) {
            return Err(UsdError::InvalidParameter(format!(
                "reaction rate must be >= 0, got {}",
                self.reaction_rate
            )));
        }
        if mode == ReactionMode::BirthDeath && !(positive(self.alpha) && positive(self.reaction_rate)) {
            return Err(UsdError::InvalidParameter("birth-death needs alpha > 0 and tau > 0".into()));
        }
        AlmState::new(self.lambda_aug_init, self.rho)?;
        Ok(())
    }

    fn update_config(&self, n_steps: usize) -> CriticUpdateConfig<T> {
        CriticUpdateConfig {
            n_steps,
            learning_rate: self.critic_lr,
            alpha: self.alpha,
            gamma: self.gamma,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
        }
    }
}

/// Scale-free discrepancy estimate `Ê² / Ω̂`; equals SF² at the optimum of
/// the constrained problem whatever the critic's scale.
fn sf2_estimate<T: Real>(parts: &AlmParts<T>) -> T {
    let omega = parts.omega();
    if omega > T::zero() {
        parts.e_hat * parts.e_hat / omega
    } else {
        T::zero()
    }
}

/// Neural unbalanced Sobolev descent.
///
/// At every step the critic is trained on the current particles
/// (`critic_steps_startup` steps the first time, `critic_steps` after),
/// a record is taken, and the particles move. The trace's `sf2` column is
/// `Ê²/Ω̂` on the full sets; `mmd2` and `mmd2_descent` both use `fm_eval`.
///
/// Returns the final critic alongside the trace so runs can be resumed.
pub fn run_neural_usd<T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    cfg: &NeuralConfig<T>,
    mode: ReactionMode,
    fm_eval: &FeatureMap<T>,
    initial_critic: Option<NeuralCritic<T>>,
) -> std::result::Result<(DescentTrace<T>, NeuralCritic<T>), RunFailure<T>> {
    let mut trace = DescentTrace::new();
    let setup = (|| -> Result<_> {
        cfg.validate(mode)?;
        let state = match mode {
            ReactionMode::BirthDeath => DescentState::uniform(source),
            _ => DescentState::from_particles(source)?,
        };
        let critic = match initial_critic {
            Some(c) => {
                crate::error::check_dim(source.dim(), c.dim_in())?;
                c
            }
            None if cfg.zero_init => NeuralCritic::zeros(source.dim(), &cfg.hidden, cfg.activation)?,
            None => {
                let mut init_rng = seeded_rng(sub_seed(cfg.seed, 1));
                NeuralCritic::new(source.dim(), &cfg.hidden, cfg.activation, &mut init_rng)?
            }
        };
        crate::error::check_dim(source.dim(), target.dim())?;
        Ok((state, critic, mean_embedding(target, fm_eval)?))
    })();
    let (mut state, mut critic, target_eval) = match setup {
        Ok(s) => s,
        Err(error) => return Err(RunFailure { trace, error }),
    };
    let mut alm = match AlmState::new(cfg.lambda_aug_init, cfg.rho) {
        Ok(a) => a,
        Err(error) => return Err(RunFailure { trace, error }),
    };
    let mut batch_rng = seeded_rng(sub_seed(cfg.seed, 2));
    let mut reaction_rng = seeded_rng(sub_seed(cfg.seed, 3));

    for step in 0..=cfg.n_steps {
        let outcome = (|| -> Result<Option<DescentState<T>>> {
            let particles = state.particles()?;
            let n_c = if step == 0 { cfg.critic_steps_startup } else { cfg.critic_steps };
            if step > 0 && cfg.reset_optimizer {
                alm.optimizer.reset();
            }
            if n_c > 0 {
                critic_update(&mut critic, &mut alm, target, &particles, &cfg.update_config(n_c), &mut batch_rng)?;
            }
            let coef = AlmCoefficients {
                lambda_aug: alm.lambda_aug,
                rho: alm.rho,
                alpha: cfg.alpha,
                gamma: cfg.gamma,
            };
            let parts = alm_objective(&critic, target, &particles, &coef)?;
            let mmd2 = (&target_eval - mean_embedding(&particles, fm_eval)?).norm_squared();
            trace.records.push(TraceRecord {
                step,
                mmd2,
                sf2: sf2_estimate(&parts),
                total_mass: particles.total_mass(),
                n_particles: particles.len(),
                mmd2_descent: mmd2,
            });
            if cfg.snapshot_every > 0 && (step % cfg.snapshot_every == 0 || step == cfg.n_steps) {
                trace.snapshots.push(Snapshot { step, particles });
            }
            if step == cfg.n_steps {
                return Ok(None);
            }
            let next = match mode {
                ReactionMode::None => advect(&state, &critic, cfg.step_size)?,
                ReactionMode::Weighted => {
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
                        &mut reaction_rng,
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
            Err(error) => return Err(RunFailure { trace, error }),
        }
    }
    Ok((trace, critic))
}

/// [`run_neural_usd`] without the final critic, matching the kernel runner.
pub fn run_neural_usd_trace<T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    cfg: &NeuralConfig<T>,
    mode: ReactionMode,
    fm_eval: &FeatureMap<T>,
) -> RunResult<T> {
    run_neural_usd(target, source, cfg, mode, fm_eval, None).map(|(trace, _)| trace)
}

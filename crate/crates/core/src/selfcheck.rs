//! Quick numerical self-tests on freshly seeded random instances.
//!
//! Used by `usd check`; each check is independent and reports its worst
//! observed value against a fixed tolerance.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embeddings::{Gamma, WeightedParticles};
use crate::error::Result;
use crate::features::FeatureMap;
use crate::neural_critic::{alm_objective, alm_param_grad, Activation, AlmCoefficients, NeuralCritic};
use crate::rng::{seeded_rng, sub_seed, UsdRng};
use crate::sobolev_fisher::{solve_critic_with_delta, whitened_spectrum, SfParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Worst value of the checked quantity across instances.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} worst {:.3e} (tolerance {:.1e}, {} instances)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )
    }
}

fn cloud(rng: &mut UsdRng, n: usize, d: usize, shift: f64) -> Result<WeightedParticles<f64>> {
    let pts = (0..n * d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    WeightedParticles::new(pts, raw.iter().map(|w| w / total).collect(), d)
}

struct KernelInstance {
    p: WeightedParticles<f64>,
    q: WeightedParticles<f64>,
    fm: FeatureMap<f64>,
    params: SfParams<f64>,
}

fn kernel_instance(seed: u64, k: u64) -> Result<KernelInstance> {
    let mut rng = seeded_rng(sub_seed(seed, k));
    let lambda = if rng.random::<bool>() { 1e-3 } else { 1e-1 };
    let alpha = if rng.random::<bool>() { 0.0 } else { 0.5 };
    let gamma = if rng.random::<bool>() { Gamma::Balanced } else { Gamma::Unbalanced };
    let shift = rng.random_range(0.0..2.0);
    Ok(KernelInstance {
        p: cloud(&mut rng, 200, 2, shift)?,
        q: cloud(&mut rng, 200, 2, 0.0)?,
        fm: FeatureMap::rff(2, 64, 2f64.sqrt(), rng.random())?,
        params: SfParams::new(alpha, lambda, gamma)?,
    })
}

/// Relative residual of the critic linear solve.
pub fn check_critic_residual(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let inst = kernel_instance(seed, k as u64)?;
        let (critic, _) = solve_critic_with_delta(&inst.p, &inst.q, &inst.fm, inst.params)?;
        worst = worst.max(critic.residual());
    }
    Ok(CheckOutcome {
        name: "critic solve residual",
        instances,
        worst,
        tolerance: 1e-8,
    })
}

/// `λ SF² ≤ MMD²`, reported as the relative excess `(λ SF² − MMD²)/MMD²`
/// (at most zero when the inequality holds).
pub fn check_descent_inequality(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst = f64::NEG_INFINITY;
    for k in 0..instances {
        let inst = kernel_instance(seed ^ 0x5eed, k as u64)?;
        let (critic, delta) = solve_critic_with_delta(&inst.p, &inst.q, &inst.fm, inst.params)?;
        let mmd2 = delta.norm_squared();
        worst = worst.max((inst.params.lambda * critic.sf2() - mmd2) / mmd2);
    }
    Ok(CheckOutcome {
        name: "lambda*SF^2 <= MMD^2",
        instances,
        worst,
        tolerance: 1e-10,
    })
}

/// Spectral reconstruction of the critic against the direct solve.
pub fn check_spectral_critic(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut inst = kernel_instance(seed ^ 0x5bec, k as u64)?;
        inst.params.alpha = 0.5;
        let (critic, delta) = solve_critic_with_delta(&inst.p, &inst.q, &inst.fm, inst.params)?;
        let spectrum = whitened_spectrum(&inst.q, &inst.fm, inst.params, &delta)?;
        let rel = (spectrum.critic_coeffs() - critic.coeffs()).norm() / critic.coeffs().norm();
        worst = worst.max(rel);
    }
    Ok(CheckOutcome {
        name: "spectral critic",
        instances,
        worst,
        tolerance: 1e-6,
    })
}

/// Maximum relative error of the neural objective's parameter gradient
/// against central finite differences (step `1e-4`).
pub fn check_neural_gradient(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = seeded_rng(sub_seed(seed ^ 0x9ad, k as u64));
        let d = rng.random_range(1..4);
        let hidden: Vec<usize> = (0..3).map(|_| rng.random_range(2..7)).collect();
        let net = NeuralCritic::new(d, &hidden, Activation::Tanh, &mut rng)?;
        let p = cloud(&mut rng, 8, d, 0.5)?;
        let q = cloud(&mut rng, 7, d, 0.0)?;
        let coef = AlmCoefficients {
            lambda_aug: rng.random_range(-1.0..1.0),
            rho: rng.random_range(0.0..2.0),
            alpha: rng.random_range(0.0..1.0),
            gamma: if k % 2 == 0 { Gamma::Balanced } else { Gamma::Unbalanced },
        };
        let grad = alm_param_grad(&net, &p, &q, &coef)?.params.to_flat();
        let base = net.params().to_flat();
        let mut probe = net.clone();
        let mut objective_at = |flat: &[f64]| -> Result<f64> {
            probe.params_mut().set_flat(flat)?;
            Ok(alm_objective(&probe, &p, &q, &coef)?.objective)
        };
        for (i, g) in grad.iter().enumerate() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + h;
            let plus = objective_at(&shifted)?;
            shifted[i] = base[i] - h;
            let minus = objective_at(&shifted)?;
            let fd = (plus - minus) / (2.0 * h);
            let scale = g.abs().max(fd.abs());
            if scale > 0.0 {
                worst = worst.max((g - fd).abs() / scale);
            }
        }
    }
    Ok(CheckOutcome {
        name: "neural parameter gradient",
        instances,
        worst,
        tolerance: 1e-4,
    })
}

/// All checks with their default instance counts.
pub fn run_self_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_critic_residual(seed, 50)?,
        check_descent_inequality(seed, 100)?,
        check_spectral_critic(seed, 20)?,
        check_neural_gradient(seed, 20)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_on_small_runs() {
        for outcome in [
            check_critic_residual(1, 3).unwrap(),
            check_descent_inequality(1, 3).unwrap(),
            check_spectral_critic(1, 2).unwrap(),
            check_neural_gradient(1, 2).unwrap(),
        ] {
            assert!(outcome.passed(), "{outcome}");
        }
    }

    #[test]
    fn display_marks_failures() {
        let o = CheckOutcome {
            name: "x",
            instances: 1,
            worst: 2.0,
            tolerance: 1.0,
        };
        assert!(o.to_string().starts_with("FAIL"));
    }
}

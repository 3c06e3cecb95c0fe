use log::warn;
use rand::seq::index::sample;
use rand::Rng;

use super::{critic_values, Critic, DescentState};
use crate::embeddings::Gamma;
use crate::error::{Result, UsdError};
use crate::rng::UsdRng;
use crate::scalar::Real;

/// Bound on unbalanced log-weights; beyond it `exp` over- or underflows.
pub const LOG_WEIGHT_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WeightReport {
    /// Number of log-weights clamped to `±LOG_WEIGHT_CLAMP`.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BirthDeathReport {
    pub born: usize,
    pub killed: usize,
    /// Particles removed while restoring the population size.
    pub restore_killed: usize,
    /// Particles duplicated while restoring the population size.
    pub restore_duplicated: usize,
}

fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values.iter().copied().fold(values[0], T::max);
    let sum = values.iter().fold(T::zero(), |acc, v| acc + (*v - max).exp());
    max + sum.ln()
}

/// Reweighs particles by `a_j = log w_j + τ (u(x_j) − γ m)` with
/// `m = Σ_j w_j u(x_j)`, evaluated at the current positions.
///
/// `γ = 1` normalizes by a max-shifted softmax so masses sum to one.
/// `γ = 0` keeps `w_j = exp(a_j)` with log-weights clamped to `[−50, 50]`.
pub fn react_weights<T: Real, C: Critic<T> + ?Sized>(
    state: &DescentState<T>,
    critic: &C,
    tau: T,
    gamma: Gamma,
) -> Result<(DescentState<T>, WeightReport)> {
    if !(tau.is_finite_value() && tau >= T::zero()) {
        return Err(UsdError::InvalidParameter(format!("reaction rate must be >= 0, got {tau}")));
    }
    let values = critic_values(critic, state.positions(), state.dim())?;
    if values.iter().any(|v| !v.is_finite_value()) {
        return Err(UsdError::NonFinite("critic value during reaction".into()));
    }
    let mean = state
        .log_weights()
        .iter()
        .zip(&values)
        .fold(T::zero(), |acc, (a, u)| acc + a.exp() * *u);
    let shift = gamma.value::<T>() * mean;
    let mut log_weights: Vec<T> = state
        .log_weights()
        .iter()
        .zip(&values)
        .map(|(a, u)| *a + tau * (*u - shift))
        .collect();

    let mut report = WeightReport::default();
    match gamma {
        Gamma::Balanced => {
            let lse = log_sum_exp(&log_weights);
            log_weights.iter_mut().for_each(|a| *a -= lse);
        }
        Gamma::Unbalanced => {
            let bound = T::lit(LOG_WEIGHT_CLAMP);
            for a in log_weights.iter_mut() {
                if *a > bound || *a < -bound {
                    *a = a.clamp(-bound, bound);
                    report.clamped += 1;
                }
            }
            if report.clamped > 0 {
                warn!("clamped {} log-weights to +/-{LOG_WEIGHT_CLAMP}", report.clamped);
            }
        }
    }
    let next = DescentState::from_parts(state.positions().to_vec(), log_weights, state.dim(), state.step);
    Ok((next, report))
}

/// Birth-death reaction on a uniformly weighted population.
///
/// With `β_j = f(x_j) − γ m`, a particle with `β_j > 0` is duplicated with
/// probability `1 − exp(−ατβ_j)` and one with `β_j < 0` is killed with
/// probability `1 − exp(−ατ|β_j|)`. Random kills or duplications then restore
/// the original population size and every weight is reset to `1/n`.
///
/// `m` is the mean critic value over the current positions. When `previous`
/// is given, the mean for particle `j` instead mixes current positions for
/// indices `≤ j` with `previous` positions for the rest.
///
/// One uniform draw is consumed per particle in index order.
pub fn react_birth_death<T: Real, C: Critic<T> + ?Sized>(
    state: &DescentState<T>,
    critic: &C,
    alpha: T,
    tau: T,
    gamma: Gamma,
    rng: &mut UsdRng,
    previous: Option<&DescentState<T>>,
) -> Result<(DescentState<T>, BirthDeathReport)> {
    if !(alpha > T::zero() && tau > T::zero() && (alpha * tau).is_finite_value()) {
        return Err(UsdError::InvalidParameter("birth-death needs alpha > 0 and tau > 0".into()));
    }
    let n = state.len();
    let dim = state.dim();
    let values = critic_values(critic, state.positions(), dim)?;
    if values.iter().any(|v| !v.is_finite_value()) {
        return Err(UsdError::NonFinite("critic value during birth-death".into()));
    }
    let inv_n = T::one() / T::from_count(n);
    let gamma_v = gamma.value::<T>();
    let rate = (alpha * tau).to_f64_lossy();

    // running means for the sequential variant
    let means: Vec<T> = match previous {
        Some(prev) => {
            if prev.len() != n {
                return Err(UsdError::DimensionMismatch { expected: n, got: prev.len() });
            }
            let stale = critic_values(critic, prev.positions(), dim)?;
            let mut acc = stale.iter().fold(T::zero(), |a, v| a + *v);
            values
                .iter()
                .zip(&stale)
                .map(|(new, old)| {
                    acc += *new - *old;
                    acc * inv_n
                })
                .collect()
        }
        None => {
            let m = values.iter().fold(T::zero(), |a, v| a + *v) * inv_n;
            vec![m; n]
        }
    };

    let mut report = BirthDeathReport::default();
    let mut survivors: Vec<usize> = Vec::with_capacity(2 * n);
    for j in 0..n {
        let beta = (values[j] - gamma_v * means[j]).to_f64_lossy();
        let draw: f64 = rng.random();
        survivors.push(j);
        if beta > 0.0 {
            if draw < 1.0 - (-rate * beta).exp() {
                survivors.push(j);
                report.born += 1;
            }
        } else if beta < 0.0 && draw < 1.0 - (-rate * beta.abs()).exp() {
            survivors.pop();
            report.killed += 1;
        }
    }
    if survivors.is_empty() {
        return Err(UsdError::AllParticlesKilled { step: state.step });
    }

    let count = survivors.len();
    if count > n {
        let mut drop = vec![false; count];
        for k in sample(rng, count, count - n) {
            drop[k] = true;
        }
        survivors = survivors
            .into_iter()
            .zip(drop)
            .filter_map(|(idx, d)| (!d).then_some(idx))
            .collect();
        report.restore_killed = count - n;
    } else if count < n {
        for _ in 0..(n - count) {
            let k = rng.random_range(0..count);
            survivors.push(survivors[k]);
        }
        report.restore_duplicated = n - count;
    }

    let mut positions = Vec::with_capacity(n * dim);
    for &idx in &survivors {
        positions.extend_from_slice(state.position(idx));
    }
    let log_w = -T::from_count(n).ln();
    let next = DescentState::from_parts(positions, vec![log_w; n], dim, state.step);
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    use crate::embeddings::WeightedParticles;
    use crate::features::FeatureMap;
    use crate::rng::seeded_rng;
    use crate::sobolev_fisher::{KernelCritic, SfParams};

    struct Constant(f64);
    impl Critic<f64> for Constant {
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(self.0)
        }
        fn grad(&self, x: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::zeros(x.len()))
        }
    }

    /// Critic equal to the first coordinate.
    struct FirstCoord;
    impl Critic<f64> for FirstCoord {
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(x[0])
        }
        fn grad(&self, x: &[f64]) -> Result<DVector<f64>> {
            let mut g = DVector::zeros(x.len());
            g[0] = 1.0;
            Ok(g)
        }
    }

    fn state(points: Vec<f64>, weights: Vec<f64>) -> DescentState<f64> {
        DescentState::from_particles(&WeightedParticles::new(points, weights, 1).unwrap()).unwrap()
    }

    #[test]
    fn softmax_invariant_to_constant_critic() {
        let s = state(vec![0.0, 1.0, 2.0], vec![0.2, 0.3, 0.5]);
        let (next, _) = react_weights(&s, &Constant(3.7), 0.5, Gamma::Balanced).unwrap();
        for (a, b) in next.weights().iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_particle_unbalanced_growth() {
        let s = state(vec![0.0], vec![1.0]);
        let (next, report) = react_weights(&s, &Constant(2.0), 0.3, Gamma::Unbalanced).unwrap();
        assert!((next.weights()[0] - (0.6f64).exp()).abs() < 1e-15);
        assert_eq!(report.clamped, 0);
    }

    #[test]
    fn two_particle_softmax() {
        let s = state(vec![1.0, -1.0], vec![0.5, 0.5]);
        let (next, _) = react_weights(&s, &FirstCoord, 1.0, Gamma::Balanced).unwrap();
        let e2 = 2f64.exp();
        let w = next.weights();
        assert!((w[0] - e2 / (1.0 + e2)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert!((w[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn unbalanced_clamp_is_reported() {
        let s = state(vec![0.0], vec![1.0]);
        let (next, report) = react_weights(&s, &Constant(1e3), 1.0, Gamma::Unbalanced).unwrap();
        assert_eq!(report.clamped, 1);
        assert_eq!(next.log_weights()[0], LOG_WEIGHT_CLAMP);
    }

    #[test]
    fn negative_tau_rejected() {
        let s = state(vec![0.0], vec![1.0]);
        assert!(react_weights(&s, &Constant(1.0), -1.0, Gamma::Balanced).is_err());
    }

    #[test]
    fn zero_beta_leaves_population_unchanged() {
        let s = DescentState::uniform(&WeightedParticles::uniform(vec![0.0, 1.0, 2.0, 3.0], 1).unwrap());
        let mut rng = seeded_rng(0);
        // constant critic with gamma = 1 gives beta = 0 exactly
        let (next, report) =
            react_birth_death(&s, &Constant(0.25), 1.0, 1.0, Gamma::Balanced, &mut rng, None).unwrap();
        assert_eq!(next.positions(), s.positions());
        assert_eq!(report, BirthDeathReport::default());
    }

    #[test]
    fn population_restored_to_n() {
        let pts: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.5).collect();
        let mut s = DescentState::uniform(&WeightedParticles::uniform(pts, 1).unwrap());
        let mut rng = seeded_rng(3);
        for _ in 0..20 {
            let (next, _) =
                react_birth_death(&s, &FirstCoord, 1.0, 0.5, Gamma::Balanced, &mut rng, None).unwrap();
            assert_eq!(next.len(), 50);
            assert!(next.weights().iter().all(|w| (w - 0.02).abs() < 1e-15));
            s = next;
        }
    }

    #[test]
    fn birth_death_shifts_population_toward_high_critic() {
        let pts: Vec<f64> = (0..200).map(|i| i as f64 / 100.0 - 1.0).collect();
        let s = DescentState::uniform(&WeightedParticles::uniform(pts, 1).unwrap());
        let mut rng = seeded_rng(11);
        let (next, _) = react_birth_death(&s, &FirstCoord, 1.0, 2.0, Gamma::Balanced, &mut rng, None).unwrap();
        let mean: f64 = next.positions().iter().sum::<f64>() / 200.0;
        assert!(mean > 0.1, "mean {mean}");
    }

    #[test]
    fn all_killed_is_an_error() {
        let s = DescentState::uniform(&WeightedParticles::uniform(vec![0.0, 0.0], 1).unwrap());
        let mut rng = seeded_rng(0);
        let err = react_birth_death(&s, &Constant(-1e6), 1.0, 1.0, Gamma::Unbalanced, &mut rng, None).unwrap_err();
        assert!(matches!(err, UsdError::AllParticlesKilled { .. }));
    }

    #[test]
    fn sequential_mean_matches_definition() {
        // with previous == current positions the running mix equals the plain mean
        let pts: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let s = DescentState::uniform(&WeightedParticles::uniform(pts, 1).unwrap());
        let (a, _) = react_birth_death(&s, &FirstCoord, 1.0, 0.3, Gamma::Balanced, &mut seeded_rng(5), None).unwrap();
        let (b, _) =
            react_birth_death(&s, &FirstCoord, 1.0, 0.3, Gamma::Balanced, &mut seeded_rng(5), Some(&s)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_critic_reaction_mass_bookkeeping() {
        let fm = FeatureMap::rff(1, 6, 1.0, 2).unwrap();
        let coeffs = DVector::from_row_slice(&[0.5, -0.2, 0.9, 0.1, -0.7, 0.3]);
        let params = SfParams::new(0.5, 1.0, Gamma::Unbalanced).unwrap();
        let critic = KernelCritic::from_coeffs(coeffs, &fm, params).unwrap();
        let s = state(vec![-0.5, 0.2, 1.4], vec![0.3, 0.9, 0.6]);
        let (next, _) = react_weights(&s, &critic, 0.4, Gamma::Unbalanced).unwrap();
        let want: f64 = (0..3)
            .map(|j| s.weights()[j] * (0.4 * critic.value(s.position(j)).unwrap()).exp())
            .sum();
        assert!((next.total_mass() - want).abs() <= 1e-12 * want);
    }
}

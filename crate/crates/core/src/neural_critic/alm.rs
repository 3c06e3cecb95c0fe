//! Augmented-Lagrangian objective for the neural critic and its exact
//! parameter gradient.
//!
//! With target weights `a_i`, source weights `w_j` and `f = f_ξ`:
//!
//! ```text
//! E = Σ a_i f(x_i) − m,        m = Σ w_j f(y_j)
//! S = Σ w_j |∇f(y_j)|²,        F = Σ w_j f(y_j)² − γ m²
//! c = S + α F − 1
//! L = E − λ c − (ρ/2) c²
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::network::{NetParams, NeuralCritic};
use crate::embeddings::{Gamma, WeightedParticles};
use crate::error::{check_dim, Result, UsdError};
use crate::scalar::Real;

/// Points per parallel work item.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlmParts<T: Real> {
    /// `L`, to be maximized.
    pub objective: T,
    /// `c = Ω̂ − 1`.
    pub constraint: T,
    /// `Ê = Σ a f(x) − Σ w f(y)`.
    pub e_hat: T,
    pub s_part: T,
    pub f_part: T,
}

impl<T: Real> AlmParts<T> {
    /// `Ω̂ = S + αF`.
    pub fn omega(&self) -> T {
        self.constraint + T::one()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlmGrad<T: Real> {
    pub params: NetParams<T>,
    /// `∂L/∂λ = 1 − Ω̂`.
    pub g_lambda: T,
    pub parts: AlmParts<T>,
}

/// Coefficients of the objective that stay fixed during a critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlmCoefficients<T: Real> {
    pub lambda_aug: T,
    pub rho: T,
    pub alpha: T,
    pub gamma: Gamma,
}

/// Dropout masks for one evaluation, sliced per chunk.
type Masks<T> = [Option<DMatrix<T>>];

fn chunk_masks<T: Real>(masks: Option<&Masks<T>>, start: usize, len: usize) -> Option<Vec<Option<DMatrix<T>>>> {
    masks.map(|m| {
        m.iter()
            .map(|layer| layer.as_ref().map(|mat| mat.columns(start, len).into_owned()))
            .collect()
    })
}

fn n_chunks(n: usize) -> usize {
    n.div_ceil(CHUNK)
}

/// `(Σ w f, Σ w f², Σ w |∇f|², f per point)`.
fn source_sums<T: Real>(
    critic: &NeuralCritic<T>,
    source: &WeightedParticles<T>,
    masks: Option<&Masks<T>>,
) -> Result<(T, T, T, Vec<T>)> {
    let d = source.dim();
    let n = source.len();
    let parts: Vec<(DVector<T>, DVector<T>)> = (0..n_chunks(n))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            let m = chunk_masks(masks, start, end - start);
            let (values, sq, _) = critic.seeded_param_grad(
                &source.points()[start * d..end * d],
                m.as_deref(),
                None,
            )?;
            Ok((values, sq))
        })
        .collect::<Result<_>>()?;
    let (mut sum_f, mut sum_f2, mut sum_s) = (T::zero(), T::zero(), T::zero());
    let mut values = Vec::with_capacity(n);
    let weights = source.weights();
    for (vals, sq) in &parts {
        for (f, s) in vals.iter().zip(sq.iter()) {
            let w = weights[values.len()];
            sum_f += w * *f;
            sum_f2 += w * *f * *f;
            sum_s += w * *s;
            values.push(*f);
        }
    }
    Ok((sum_f, sum_f2, sum_s, values))
}

fn parts_from_sums<T: Real>(target_sum: T, sum_f: T, sum_f2: T, sum_s: T, coef: &AlmCoefficients<T>) -> AlmParts<T> {
    let gamma = coef.gamma.value::<T>();
    let f_part = sum_f2 - gamma * sum_f * sum_f;
    let constraint = sum_s + coef.alpha * f_part - T::one();
    let e_hat = target_sum - sum_f;
    AlmParts {
        objective: e_hat - coef.lambda_aug * constraint - coef.rho / T::lit(2.0) * constraint * constraint,
        constraint,
        e_hat,
        s_part: sum_s,
        f_part,
    }
}

fn check_inputs<T: Real>(
    critic: &NeuralCritic<T>,
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    coef: &AlmCoefficients<T>,
) -> Result<()> {
    check_dim(critic.dim_in(), target.dim())?;
    check_dim(critic.dim_in(), source.dim())?;
    if !(coef.alpha.is_finite_value() && coef.alpha >= T::zero()) {
        return Err(UsdError::InvalidParameter(format!("alpha must be >= 0, got {}", coef.alpha)));
    }
    if !(coef.rho.is_finite_value() && coef.rho >= T::zero()) {
        return Err(UsdError::InvalidParameter(format!("rho must be >= 0, got {}", coef.rho)));
    }
    if !coef.lambda_aug.is_finite_value() {
        return Err(UsdError::NonFinite("augmented Lagrange multiplier".into()));
    }
    Ok(())
}

fn finite_parts<T: Real>(parts: AlmParts<T>) -> Result<AlmParts<T>> {
    let all = [parts.objective, parts.constraint, parts.e_hat, parts.s_part, parts.f_part];
    if all.iter().all(|v| v.is_finite_value()) {
        Ok(parts)
    } else {
        Err(UsdError::NonFinite("critic objective".into()))
    }
}

/// Objective value and its parts.
pub fn alm_objective<T: Real>(
    critic: &NeuralCritic<T>,
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    coef: &AlmCoefficients<T>,
) -> Result<AlmParts<T>> {
    check_inputs(critic, target, source, coef)?;
    let target_values = critic.forward_batch_par(target.points())?;
    let target_sum = target
        .weights()
        .iter()
        .zip(&target_values)
        .fold(T::zero(), |acc, (a, f)| acc + *a * *f);
    let (sum_f, sum_f2, sum_s, _) = source_sums(critic, source, None)?;
    finite_parts(parts_from_sums(target_sum, sum_f, sum_f2, sum_s, coef))
}

/// Exact gradient of [`alm_objective`] with respect to every network
/// parameter, including the second-order `|∇_x f|²` term.
pub fn alm_param_grad<T: Real>(
    critic: &NeuralCritic<T>,
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    coef: &AlmCoefficients<T>,
) -> Result<AlmGrad<T>> {
    alm_param_grad_masked(critic, target, source, coef, None, None)
}

pub(crate) fn alm_param_grad_masked<T: Real>(
    critic: &NeuralCritic<T>,
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    coef: &AlmCoefficients<T>,
    target_masks: Option<&Masks<T>>,
    source_masks: Option<&Masks<T>>,
) -> Result<AlmGrad<T>> {
    check_inputs(critic, target, source, coef)?;
    let d = critic.dim_in();
    let two = T::lit(2.0);
    let gamma = coef.gamma.value::<T>();

    // target side: f̄_i = a_i
    let n_t = target.len();
    let t_weights = target.weights();
    let target_chunks: Vec<(T, NetParams<T>)> = (0..n_chunks(n_t))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n_t);
            let m = chunk_masks(target_masks, start, end - start);
            let f_bar = DVector::from_column_slice(&t_weights[start..end]);
            let r_bar = DVector::zeros(end - start);
            let (values, _, grad) = critic.seeded_param_grad(
                &target.points()[start * d..end * d],
                m.as_deref(),
                Some((&f_bar, &r_bar)),
            )?;
            Ok((values.dot(&f_bar), grad.expect("seeds given")))
        })
        .collect::<Result<_>>()?;

    let (sum_f, sum_f2, sum_s, source_values) = source_sums(critic, source, source_masks)?;
    let target_sum = target_chunks.iter().fold(T::zero(), |acc, (s, _)| acc + *s);
    let parts = finite_parts(parts_from_sums(target_sum, sum_f, sum_f2, sum_s, coef))?;

    // source side: ∂L/∂f_j and ∂L/∂|∇f_j|²
    let kappa = coef.lambda_aug + coef.rho * parts.constraint;
    let n_s = source.len();
    let s_weights = source.weights();
    let source_chunks: Vec<NetParams<T>> = (0..n_chunks(n_s))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n_s);
            let m = chunk_masks(source_masks, start, end - start);
            let f_bar = DVector::from_fn(end - start, |i, _| {
                let w = s_weights[start + i];
                let f = source_values[start + i];
                -w - kappa * coef.alpha * two * w * (f - gamma * sum_f)
            });
            let r_bar = DVector::from_fn(end - start, |i, _| -kappa * s_weights[start + i]);
            let (_, _, grad) = critic.seeded_param_grad(
                &source.points()[start * d..end * d],
                m.as_deref(),
                Some((&f_bar, &r_bar)),
            )?;
            Ok(grad.expect("seeds given"))
        })
        .collect::<Result<_>>()?;

    // fixed summation order keeps the result independent of thread count
    let mut total = NetParams::zeros_like(critic.params());
    for grad in target_chunks.iter().map(|(_, g)| g).chain(&source_chunks) {
        total.add_assign(grad);
    }
    if !total.is_finite() {
        return Err(UsdError::NonFinite("critic parameter gradient".into()));
    }
    Ok(AlmGrad {
        params: total,
        g_lambda: -parts.constraint,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_critic::network::Activation;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> WeightedParticles<f64> {
        let mut rng = seeded_rng(seed);
        let pts = (0..n * d).map(|_| shift + rng.random_range(-1.0..1.0)).collect();
        let w = (0..n).map(|_| rng.random_range(0.1..1.0) / n as f64).collect();
        WeightedParticles::new(pts, w, d).unwrap()
    }

    fn coef(gamma: Gamma) -> AlmCoefficients<f64> {
        AlmCoefficients {
            lambda_aug: 0.3,
            rho: 0.7,
            alpha: 0.6,
            gamma,
        }
    }

    #[test]
    fn zero_critic_objective() {
        let net = NeuralCritic::<f64>::zeros(2, &[4, 4], Activation::Tanh).unwrap();
        let p = cloud(10, 2, 1.0, 1);
        let q = cloud(12, 2, 0.0, 2);
        let parts = alm_objective(&net, &p, &q, &coef(Gamma::Balanced)).unwrap();
        assert_eq!(parts.e_hat, 0.0);
        assert_eq!(parts.s_part, 0.0);
        assert_eq!(parts.f_part, 0.0);
        assert_eq!(parts.constraint, -1.0);
        assert_eq!(parts.objective, 0.3 - 0.7 / 2.0);
    }

    #[test]
    fn linear_critic_s_part() {
        let params = NetParams {
            weights: vec![],
            biases: vec![],
            output: DVector::from_row_slice(&[1.5, -0.5]),
        };
        let net = NeuralCritic::from_params(2, params, Activation::Tanh).unwrap();
        let p = cloud(5, 2, 0.0, 3);
        let q = cloud(7, 2, 0.0, 4);
        let parts = alm_objective(&net, &p, &q, &coef(Gamma::Unbalanced)).unwrap();
        let expected = 2.5 * q.total_mass();
        assert!((parts.s_part - expected).abs() < 1e-14);
    }

    #[test]
    fn g_lambda_is_one_minus_omega() {
        let mut rng = seeded_rng(5);
        let net = NeuralCritic::<f64>::new(2, &[5, 5], Activation::Tanh, &mut rng).unwrap();
        let p = cloud(9, 2, 0.5, 6);
        let q = cloud(11, 2, 0.0, 7);
        let g = alm_param_grad(&net, &p, &q, &coef(Gamma::Balanced)).unwrap();
        assert_eq!(g.g_lambda, 1.0 - g.parts.omega());
        let direct = alm_objective(&net, &p, &q, &coef(Gamma::Balanced)).unwrap();
        assert!((direct.objective - g.parts.objective).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences_small() {
        let mut rng = seeded_rng(9);
        let net = NeuralCritic::<f64>::new(2, &[3, 4], Activation::Tanh, &mut rng).unwrap();
        let p = cloud(6, 2, 0.4, 10);
        let q = cloud(5, 2, -0.2, 11);
        let c = coef(Gamma::Balanced);
        let g = alm_param_grad(&net, &p, &q, &c).unwrap().params.to_flat();
        let base = net.params().to_flat();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut xp = base.clone();
            let mut xm = base.clone();
            xp[k] += h;
            xm[k] -= h;
            plus.params_mut().set_flat(&xp).unwrap();
            minus.params_mut().set_flat(&xm).unwrap();
            let fd = (alm_objective(&plus, &p, &q, &c).unwrap().objective
                - alm_objective(&minus, &p, &q, &c).unwrap().objective)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn chunking_does_not_change_results() {
        let mut rng = seeded_rng(12);
        let net = NeuralCritic::<f64>::new(2, &[6], Activation::Softplus, &mut rng).unwrap();
        // more than one chunk on each side
        let p = cloud(600, 2, 0.3, 13);
        let q = cloud(520, 2, 0.0, 14);
        let c = coef(Gamma::Balanced);
        let a = alm_param_grad(&net, &p, &q, &c).unwrap();
        let b = alm_param_grad(&net, &p, &q, &c).unwrap();
        assert_eq!(a, b);
        let naive_target: f64 = (0..p.len()).map(|i| p.weights()[i] * net.forward(p.point(i)).unwrap()).sum();
        let naive_source: f64 = (0..q.len()).map(|j| q.weights()[j] * net.forward(q.point(j)).unwrap()).sum();
        assert!((a.parts.e_hat - (naive_target - naive_source)).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_rho() {
        let net = NeuralCritic::<f64>::zeros(2, &[2], Activation::Tanh).unwrap();
        let p = cloud(3, 2, 0.0, 1);
        let mut c = coef(Gamma::Balanced);
        c.rho = -1.0;
        assert!(alm_objective(&net, &p, &p, &c).is_err());
        let q = cloud(3, 3, 0.0, 1);
        assert!(alm_objective(&net, &p, &q, &coef(Gamma::Balanced)).is_err());
    }
}

//! Closed-form kernel Sobolev-Fisher critic.
//!
//! Given source statistics `D`, `C_γ` and the embedding difference
//! `δ = μ(p) − μ(q)`, the critic coefficients solve
//!
//! ```text
//! (D + α C_γ + λ I) u = δ
//! ```
//!
//! and the discrepancy is `SF² = <u, δ>`. The critic is the function
//! `x ↦ <u, Φ(x)>` with spatial gradient `JΦ(x) u`.
//!
//! [`whitened_spectrum`] rewrites the same solve in the basis that whitens
//! `C_γ + (λ/α) I`, which gives an independent route to `u`.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::embeddings::{embedding_delta, embedding_set, Gamma, WeightedParticles};
use crate::error::{check_dim, Result, UsdError};
use crate::features::FeatureMap;
use crate::scalar::Real;

/// Regularization parameters of the Sobolev-Fisher solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfParams<T: Real> {
    /// Fisher (L² under the source) weight `α ≥ 0`.
    pub alpha: T,
    /// Ridge `λ > 0`.
    pub lambda: T,
    pub gamma: Gamma,
}

impl<T: Real> SfParams<T> {
    pub fn new(alpha: T, lambda: T, gamma: Gamma) -> Result<Self> {
        let p = Self { alpha, lambda, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite_value() && self.alpha >= T::zero()) {
            return Err(UsdError::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lambda.is_finite_value() && self.lambda > T::zero()) {
            return Err(UsdError::InvalidParameter(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Critic `u(x) = <u, Φ(x)>` over a fixed feature map.
#[derive(Debug, Clone)]
pub struct KernelCritic<'a, T: Real> {
    coeffs: DVector<T>,
    feature_map: &'a FeatureMap<T>,
    params: SfParams<T>,
    sf2: T,
    residual: T,
    used_fallback: bool,
}

impl<'a, T: Real> KernelCritic<'a, T> {
    /// Wraps explicit coefficients, e.g. for tests or replay.
    pub fn from_coeffs(
        coeffs: DVector<T>,
        feature_map: &'a FeatureMap<T>,
        params: SfParams<T>,
    ) -> Result<Self> {
        check_dim(feature_map.dim_out(), coeffs.len())?;
        if coeffs.iter().any(|c| !c.is_finite_value()) {
            return Err(UsdError::NonFinite("critic coefficients".into()));
        }
        Ok(Self {
            coeffs,
            feature_map,
            params,
            sf2: T::zero(),
            residual: T::zero(),
            used_fallback: false,
        })
    }

    pub fn coeffs(&self) -> &DVector<T> {
        &self.coeffs
    }
    pub fn feature_map(&self) -> &'a FeatureMap<T> {
        self.feature_map
    }
    pub fn params(&self) -> SfParams<T> {
        self.params
    }
    /// `SF² = <u, δ>` clamped at zero; zero for critics not built by a solve.
    pub fn sf2(&self) -> T {
        self.sf2
    }
    /// Relative residual `|A u − δ| / |δ|` of the solve (zero when `δ = 0`).
    pub fn residual(&self) -> T {
        self.residual
    }
    /// True when Cholesky failed and the LU fallback produced `u`.
    pub fn used_fallback(&self) -> bool {
        self.used_fallback
    }

    pub fn value(&self, x: &[T]) -> Result<T> {
        Ok(self.feature_map.featurize(x)?.dot(&self.coeffs))
    }

    pub fn grad(&self, x: &[T]) -> Result<DVector<T>> {
        Ok(self.feature_map.feature_jacobian(x)? * &self.coeffs)
    }
}

/// Solves for the critic between `target` (p) and `source` (q).
pub fn solve_critic<'a, T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    fm: &'a FeatureMap<T>,
    params: SfParams<T>,
) -> Result<KernelCritic<'a, T>> {
    solve_critic_with_delta(target, source, fm, params).map(|(c, _)| c)
}

/// As [`solve_critic`], also returning `δ` (so `|δ|²` gives the MMD² in the
/// same feature map without recomputation).
pub fn solve_critic_with_delta<'a, T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    fm: &'a FeatureMap<T>,
    params: SfParams<T>,
) -> Result<(KernelCritic<'a, T>, DVector<T>)> {
    check_dim(fm.dim_in(), target.dim())?;
    let target_mean = crate::embeddings::mean_embedding(target, fm)?;
    solve_critic_against(&target_mean, source, fm, params)
}

/// Solve against a precomputed target embedding `μ(p)`; returns the critic
/// and `δ = μ(p) − μ(q)`.
pub fn solve_critic_against<'a, T: Real>(
    target_mean: &DVector<T>,
    source: &WeightedParticles<T>,
    fm: &'a FeatureMap<T>,
    params: SfParams<T>,
) -> Result<(KernelCritic<'a, T>, DVector<T>)> {
    params.validate()?;
    check_dim(fm.dim_out(), target_mean.len())?;
    if source.total_mass() <= T::zero() {
        return Err(UsdError::InvalidParticles("source must have positive total mass".into()));
    }
    let stats = embedding_set(source, fm, params.gamma)?;
    let delta = target_mean - &stats.mean;
    let mut system = stats.jac_gramian + stats.covariance * params.alpha;
    for i in 0..system.nrows() {
        system[(i, i)] += params.lambda;
    }
    let (coeffs, used_fallback) = solve_spd(&system, &delta)?;
    let delta_norm = delta.norm();
    let residual = if delta_norm > T::zero() {
        (&system * &coeffs - &delta).norm() / delta_norm
    } else {
        T::zero()
    };
    let sf2 = coeffs.dot(&delta).max(T::zero());
    let critic = KernelCritic {
        coeffs,
        feature_map: fm,
        params,
        sf2,
        residual,
        used_fallback,
    };
    Ok((critic, delta))
}

/// Cholesky solve with an LU fallback. Returns `(x, used_fallback)`.
fn solve_spd<T: Real>(a: &DMatrix<T>, b: &DVector<T>) -> Result<(DVector<T>, bool)> {
    if a.iter().chain(b.iter()).any(|v| !v.is_finite_value()) {
        return Err(UsdError::FactorizationFailure("system has non-finite entries".into()));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok((chol.solve(b), false));
    }
    warn!("critic system is not positive definite; falling back to LU");
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite_value()))
        .map(|x| (x, true))
        .ok_or_else(|| UsdError::FactorizationFailure("critic system is singular".into()))
}

pub fn critic_value<T: Real>(c: &KernelCritic<'_, T>, x: &[T]) -> Result<T> {
    c.value(x)
}

pub fn critic_grad<T: Real>(c: &KernelCritic<'_, T>, x: &[T]) -> Result<DVector<T>> {
    c.grad(x)
}

/// `SF²_{H,γ,λ}(p, q) = <u, δ>`, clamped at zero.
pub fn sf_discrepancy<T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    fm: &FeatureMap<T>,
    params: SfParams<T>,
) -> Result<T> {
    Ok(solve_critic(target, source, fm, params)?.sf2())
}

/// Spectral form of the critic in the whitened feature space.
#[derive(Debug, Clone)]
pub struct WhitenedSpectrum<T: Real> {
    /// Eigenvalues of `D̃`, descending.
    pub eigvals: DVector<T>,
    /// Matching eigenvectors as columns.
    pub eigvecs: DMatrix<T>,
    /// `(C_γ + (λ/α) I)^{-1/2}`.
    pub whitener: DMatrix<T>,
    pub whitened_delta: DVector<T>,
    pub alpha: T,
}

impl<T: Real> WhitenedSpectrum<T> {
    /// Whitened coefficients `v = Σ_j (λ̃_j + α)⁻¹ d̃_j <d̃_j, δ̃>`.
    pub fn whitened_coeffs(&self) -> DVector<T> {
        let proj = self.eigvecs.tr_mul(&self.whitened_delta);
        let filtered = DVector::from_fn(proj.len(), |j, _| proj[j] / (self.eigvals[j] + self.alpha));
        &self.eigvecs * filtered
    }

    /// Critic coefficients in the original feature basis, `u = W v`.
    pub fn critic_coeffs(&self) -> DVector<T> {
        &self.whitener * self.whitened_coeffs()
    }

    /// Critic gradient at `x` as a combination of whitened principal transport
    /// directions `∇_x d̃_j(x) = JΦ(x) W d̃_j`.
    pub fn critic_grad(&self, fm: &FeatureMap<T>, x: &[T]) -> Result<DVector<T>> {
        let jac_w = fm.feature_jacobian(x)? * &self.whitener;
        let proj = self.eigvecs.tr_mul(&self.whitened_delta);
        let mut grad = DVector::zeros(fm.dim_in());
        for j in 0..self.eigvals.len() {
            let coef = proj[j] / (self.eigvals[j] + self.alpha);
            grad += &jac_w * self.eigvecs.column(j) * coef;
        }
        Ok(grad)
    }
}

const EIGEN_FLOOR: f64 = 1e-12;

/// Eigendecomposition of `D̃ = W D W` with `W = (C_γ + (λ/α) I)^{-1/2}`,
/// together with `δ̃ = W δ`.
pub fn whitened_spectrum<T: Real>(
    source: &WeightedParticles<T>,
    fm: &FeatureMap<T>,
    params: SfParams<T>,
    delta: &DVector<T>,
) -> Result<WhitenedSpectrum<T>> {
    params.validate()?;
    if params.alpha <= T::zero() {
        return Err(UsdError::InvalidParameter("whitened spectrum needs alpha > 0".into()));
    }
    check_dim(fm.dim_out(), delta.len())?;
    let stats = embedding_set(source, fm, params.gamma)?;
    let mut shifted = stats.covariance;
    let shift = params.lambda / params.alpha;
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += shift;
    }
    if Cholesky::new(shifted.clone()).is_none() {
        return Err(UsdError::FactorizationFailure(
            "C_gamma + (lambda/alpha) I is not positive definite".into(),
        ));
    }
    let eig = SymmetricEigen::new(shifted);
    let floor = T::lit(EIGEN_FLOOR);
    let inv_sqrt = eig.eigenvalues.map(|e| T::one() / e.max(floor).sqrt());
    let whitener = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let whitener = (&whitener + whitener.transpose()) * T::lit(0.5);

    let d_tilde = &whitener * &stats.jac_gramian * &whitener;
    let d_tilde = (&d_tilde + d_tilde.transpose()) * T::lit(0.5);
    let spec = SymmetricEigen::new(d_tilde);
    let mut order: Vec<usize> = (0..spec.eigenvalues.len()).collect();
    order.sort_by(|a, b| {
        spec.eigenvalues[*b]
            .partial_cmp(&spec.eigenvalues[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigvals = DVector::from_iterator(order.len(), order.iter().map(|&j| spec.eigenvalues[j]));
    let eigvecs = DMatrix::from_columns(
        &order.iter().map(|&j| spec.eigenvectors.column(j).into_owned()).collect::<Vec<_>>(),
    );
    let whitened_delta = &whitener * delta;
    Ok(WhitenedSpectrum {
        eigvals,
        eigvecs,
        whitener,
        whitened_delta,
        alpha: params.alpha,
    })
}

/// Convenience wrapper computing `δ` from the particle sets first.
pub fn whitened_spectrum_between<T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    fm: &FeatureMap<T>,
    params: SfParams<T>,
) -> Result<WhitenedSpectrum<T>> {
    let delta = embedding_delta(target, source, fm)?;
    whitened_spectrum(source, fm, params, &delta)
}

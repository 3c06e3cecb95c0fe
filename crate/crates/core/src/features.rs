//! Finite-dimensional feature maps `Φ: R^d → R^m` with analytic Jacobians.
//!
//! The workhorse is the random Fourier feature (RFF) map
//!
//! ```text
//! Φ_j(x) = sqrt(2/m) · cos(<ω_j, x> + b_j),   ω_j ~ N(0, σ⁻² I_d),  b_j ~ U[0, 2π)
//! ```
//!
//! whose inner products approximate the Gaussian kernel
//! `k(x, y) = exp(-|x - y|² / (2σ²))`. Two deterministic maps (identity and
//! per-coordinate monomials) exist for analytically forced tests.
//!
//! A map is immutable once built; every operation is a pure function of the
//! map and its input.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result, UsdError};
use crate::rng::seeded_rng;
use crate::scalar::Real;

/// Which family a [`FeatureMap`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Rff,
    Identity,
    /// Features `x_a^k` for every coordinate `a` and `k = 1..=degree`.
    Polynomial { degree: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real> {
    kind: FeatureKind,
    dim_in: usize,
    dim_out: usize,
    /// RFF frequencies, one row per feature (m × d). Empty for other kinds.
    frequencies: DMatrix<T>,
    phases: DVector<T>,
    scale: T,
    bandwidth: T,
    seed: u64,
}

impl<T: Real> FeatureMap<T> {
    /// Samples a random Fourier feature map approximating a Gaussian kernel of
    /// width `bandwidth`. The same `(d, m, bandwidth, seed)` always produces a
    /// bit-identical map.
    pub fn rff(d: usize, m: usize, bandwidth: T, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(UsdError::InvalidDimension(format!(
                "rff map needs d >= 1 and m >= 1 (got d={d}, m={m})"
            )));
        }
        if !(bandwidth.is_finite_value() && bandwidth > T::zero()) {
            return Err(UsdError::InvalidBandwidth(bandwidth.to_f64_lossy()));
        }
        let mut rng = seeded_rng(seed);
        let inv_sigma = 1.0 / bandwidth.to_f64_lossy();
        // draw in f64 so that f32 and f64 maps share their parameters
        let mut freq = Vec::with_capacity(m * d);
        let mut phases = Vec::with_capacity(m);
        for _ in 0..m {
            for _ in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                freq.push(T::lit(z * inv_sigma));
            }
            let b: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            phases.push(T::lit(b));
        }
        Ok(Self {
            kind: FeatureKind::Rff,
            dim_in: d,
            dim_out: m,
            frequencies: DMatrix::from_row_slice(m, d, &freq),
            phases: DVector::from_vec(phases),
            scale: T::lit((2.0 / m as f64).sqrt()),
            bandwidth,
            seed,
        })
    }

    /// RFF map with the default bandwidth `sqrt(d)`.
    pub fn rff_default_bandwidth(d: usize, m: usize, seed: u64) -> Result<Self> {
        Self::rff(d, m, T::from_count(d.max(1)).sqrt(), seed)
    }

    /// Builds an RFF map from explicit frequencies (m × d) and phases.
    pub fn rff_from_parts(frequencies: DMatrix<T>, phases: DVector<T>) -> Result<Self> {
        let (m, d) = frequencies.shape();
        if d == 0 || m == 0 {
            return Err(UsdError::InvalidDimension(format!(
                "rff map needs d >= 1 and m >= 1 (got d={d}, m={m})"
            )));
        }
        check_dim(m, phases.len())?;
        if frequencies.iter().chain(phases.iter()).any(|v| !v.is_finite_value()) {
            return Err(UsdError::NonFinite("rff parameters".into()));
        }
        Ok(Self {
            kind: FeatureKind::Rff,
            dim_in: d,
            dim_out: m,
            frequencies,
            phases,
            scale: T::lit((2.0 / m as f64).sqrt()),
            bandwidth: T::one(),
            seed: 0,
        })
    }

    pub fn identity(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(UsdError::InvalidDimension("identity map needs d >= 1".into()));
        }
        Ok(Self::deterministic(FeatureKind::Identity, d, d))
    }

    pub fn polynomial(d: usize, degree: usize) -> Result<Self> {
        if d == 0 || degree == 0 {
            return Err(UsdError::InvalidDimension(format!(
                "polynomial map needs d >= 1 and degree >= 1 (got d={d}, degree={degree})"
            )));
        }
        Ok(Self::deterministic(FeatureKind::Polynomial { degree }, d, d * degree))
    }

    fn deterministic(kind: FeatureKind, d: usize, m: usize) -> Self {
        Self {
            kind,
            dim_in: d,
            dim_out: m,
            frequencies: DMatrix::zeros(0, 0),
            phases: DVector::zeros(0),
            scale: T::one(),
            bandwidth: T::one(),
            seed: 0,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }
    pub fn dim_out(&self) -> usize {
        self.dim_out
    }
    pub fn frequencies(&self) -> &DMatrix<T> {
        &self.frequencies
    }
    pub fn phases(&self) -> &DVector<T> {
        &self.phases
    }
    pub fn scale(&self) -> T {
        self.scale
    }
    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_point(&self, x: &[T]) -> Result<()> {
        check_dim(self.dim_in, x.len())?;
        if x.iter().any(|v| !v.is_finite_value()) {
            return Err(UsdError::NonFinite("feature map input".into()));
        }
        Ok(())
    }

    /// `<ω_j, x> + b_j` for one feature.
    #[inline]
    fn rff_angle(&self, j: usize, x: &[T]) -> T {
        let mut acc = self.phases[j];
        for (a, xa) in x.iter().enumerate() {
            acc += self.frequencies[(j, a)] * *xa;
        }
        acc
    }

    /// Evaluates `Φ(x)`.
    pub fn featurize(&self, x: &[T]) -> Result<DVector<T>> {
        self.check_point(x)?;
        Ok(match self.kind {
            FeatureKind::Rff => DVector::from_fn(self.dim_out, |j, _| {
                self.scale * self.rff_angle(j, x).cos()
            }),
            FeatureKind::Identity => DVector::from_column_slice(x),
            FeatureKind::Polynomial { degree } => {
                DVector::from_fn(self.dim_out, |idx, _| {
                    let (a, k) = (idx / degree, idx % degree + 1);
                    x[a].powi(k as i32)
                })
            }
        })
    }

    /// Jacobian `JΦ(x)` of shape d × m, entry `(a, j) = ∂Φ_j/∂x_a`.
    pub fn feature_jacobian(&self, x: &[T]) -> Result<DMatrix<T>> {
        self.check_point(x)?;
        let (d, m) = (self.dim_in, self.dim_out);
        Ok(match self.kind {
            FeatureKind::Rff => {
                let mut jac = DMatrix::zeros(d, m);
                for j in 0..m {
                    let s = -self.scale * self.rff_angle(j, x).sin();
                    for a in 0..d {
                        jac[(a, j)] = s * self.frequencies[(j, a)];
                    }
                }
                jac
            }
            FeatureKind::Identity => DMatrix::identity(d, d),
            FeatureKind::Polynomial { degree } => {
                let mut jac = DMatrix::zeros(d, m);
                for a in 0..d {
                    for k in 1..=degree {
                        jac[(a, a * degree + k - 1)] = T::from_count(k) * x[a].powi(k as i32 - 1);
                    }
                }
                jac
            }
        })
    }

    /// Angle matrix `Θ_ij = <ω_j, x_i> + b_j` (n × m) for RFF maps.
    fn angle_matrix(&self, points: &[T], n: usize) -> DMatrix<T> {
        let x = DMatrix::from_row_slice(n, self.dim_in, points);
        let mut theta = x * self.frequencies.transpose();
        for (j, mut col) in theta.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.phases[j]);
        }
        theta
    }

    /// Feature matrix with one row `Φ(x_i)ᵀ` per point (n × m). `points` is
    /// row-major n × d.
    pub fn feature_matrix(&self, points: &[T]) -> Result<DMatrix<T>> {
        let n = self.count_points(points)?;
        self.check_finite(points)?;
        if self.kind == FeatureKind::Rff {
            let scale = self.scale;
            return Ok(self.angle_matrix(points, n).map(|t| scale * t.cos()));
        }
        let mut out = DMatrix::zeros(n, self.dim_out);
        for i in 0..n {
            let phi = self.featurize(&points[i * self.dim_in..(i + 1) * self.dim_in])?;
            out.row_mut(i).tr_copy_from(&phi);
        }
        Ok(out)
    }

    /// Per-coordinate Jacobian slices: element `a` is the n × m matrix whose
    /// row `i` is `∂Φ(x_i)/∂x_a`.
    pub fn jacobian_slices(&self, points: &[T]) -> Result<Vec<DMatrix<T>>> {
        let n = self.count_points(points)?;
        self.check_finite(points)?;
        let d = self.dim_in;
        if self.kind == FeatureKind::Rff {
            let scale = self.scale;
            let sines = self.angle_matrix(points, n).map(|t| -scale * t.sin());
            return Ok(self.slices_from_sines(&sines));
        }
        let mut slices = vec![DMatrix::zeros(n, self.dim_out); d];
        for i in 0..n {
            let jac = self.feature_jacobian(&points[i * d..(i + 1) * d])?;
            for (a, slice) in slices.iter_mut().enumerate() {
                slice.row_mut(i).copy_from(&jac.row(a));
            }
        }
        Ok(slices)
    }

    /// Feature matrix and Jacobian slices in one pass (RFF maps share the
    /// angle matrix).
    pub fn features_and_jacobian_slices(&self, points: &[T]) -> Result<(DMatrix<T>, Vec<DMatrix<T>>)> {
        if self.kind != FeatureKind::Rff {
            return Ok((self.feature_matrix(points)?, self.jacobian_slices(points)?));
        }
        let n = self.count_points(points)?;
        self.check_finite(points)?;
        let scale = self.scale;
        let theta = self.angle_matrix(points, n);
        let feats = theta.map(|t| scale * t.cos());
        let sines = theta.map(|t| -scale * t.sin());
        Ok((feats, self.slices_from_sines(&sines)))
    }

    fn slices_from_sines(&self, sines: &DMatrix<T>) -> Vec<DMatrix<T>> {
        (0..self.dim_in)
            .map(|a| {
                let mut slice = sines.clone();
                for (j, mut col) in slice.column_iter_mut().enumerate() {
                    col.scale_mut(self.frequencies[(j, a)]);
                }
                slice
            })
            .collect()
    }

    /// `<u, Φ(x_i)>` for every point.
    pub fn linear_values(&self, points: &[T], coeffs: &DVector<T>) -> Result<DVector<T>> {
        check_dim(self.dim_out, coeffs.len())?;
        Ok(self.feature_matrix(points)? * coeffs)
    }

    /// `JΦ(x_i) u` for every point, as an n × d matrix.
    pub fn linear_gradients(&self, points: &[T], coeffs: &DVector<T>) -> Result<DMatrix<T>> {
        check_dim(self.dim_out, coeffs.len())?;
        let n = self.count_points(points)?;
        self.check_finite(points)?;
        if self.kind == FeatureKind::Rff {
            let scale = self.scale;
            let mut weighted = self.angle_matrix(points, n).map(|t| -scale * t.sin());
            for (j, mut col) in weighted.column_iter_mut().enumerate() {
                col.scale_mut(coeffs[j]);
            }
            return Ok(weighted * &self.frequencies);
        }
        let d = self.dim_in;
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let g = self.feature_jacobian(&points[i * d..(i + 1) * d])? * coeffs;
            out.row_mut(i).tr_copy_from(&g);
        }
        Ok(out)
    }

    fn check_finite(&self, points: &[T]) -> Result<()> {
        if points.iter().any(|v| !v.is_finite_value()) {
            return Err(UsdError::NonFinite("feature map input".into()));
        }
        Ok(())
    }

    fn count_points(&self, points: &[T]) -> Result<usize> {
        if !points.len().is_multiple_of(self.dim_in) {
            return Err(UsdError::DimensionMismatch {
                expected: self.dim_in,
                got: points.len() % self.dim_in,
            });
        }
        Ok(points.len() / self.dim_in)
    }
}

/// Exact Gaussian kernel `exp(-|x - y|² / (2σ²))` matching the RFF convention.
pub fn gaussian_kernel<T: Real>(x: &[T], y: &[T], bandwidth: T) -> T {
    let sq: T = x
        .iter()
        .zip(y)
        .fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
    (-sq / (T::lit(2.0) * bandwidth * bandwidth)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::seeded_rng;

    fn fd_jacobian(fm: &FeatureMap<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(fm.dim_in(), fm.dim_out());
        for a in 0..fm.dim_in() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[a] += h;
            xm[a] -= h;
            let diff = (fm.featurize(&xp).unwrap() - fm.featurize(&xm).unwrap()) / (2.0 * h);
            jac.row_mut(a).tr_copy_from(&diff);
        }
        jac
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(
            FeatureMap::<f64>::rff(0, 4, 1.0, 0),
            Err(UsdError::InvalidDimension(_))
        ));
        assert!(matches!(
            FeatureMap::<f64>::rff(2, 0, 1.0, 0),
            Err(UsdError::InvalidDimension(_))
        ));
        assert!(matches!(
            FeatureMap::<f64>::rff(2, 4, 0.0, 0),
            Err(UsdError::InvalidBandwidth(_))
        ));
        assert!(matches!(
            FeatureMap::<f64>::rff(2, 4, -1.0, 0),
            Err(UsdError::InvalidBandwidth(_))
        ));
        let fm = FeatureMap::<f64>::identity(2).unwrap();
        assert!(matches!(
            fm.featurize(&[1.0]),
            Err(UsdError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(fm.feature_jacobian(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn paper_evaluation_map_shape() {
        let fm = FeatureMap::<f64>::rff(2, 300, 2f64.sqrt(), 7).unwrap();
        assert_eq!(fm.dim_out(), 300);
        assert_eq!(fm.frequencies().shape(), (300, 2));
        assert!(fm.phases().iter().all(|b| (0.0..std::f64::consts::TAU).contains(b)));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = FeatureMap::<f64>::rff(1, 4, 1.0, 0).unwrap();
        let b = FeatureMap::<f64>::rff(1, 4, 1.0, 0).unwrap();
        let c = FeatureMap::<f64>::rff(1, 4, 1.0, 1).unwrap();
        assert_eq!(a.frequencies(), b.frequencies());
        assert_eq!(a.phases(), b.phases());
        assert_ne!(a.frequencies(), c.frequencies());
    }

    #[test]
    fn identity_map() {
        let fm = FeatureMap::<f64>::identity(2).unwrap();
        assert_eq!(fm.featurize(&[2.0, -1.0]).unwrap().as_slice(), &[2.0, -1.0]);
        assert_eq!(fm.feature_jacobian(&[0.3, 9.0]).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn zero_phase_map_at_origin() {
        let freq = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.1, 3.0, 3.0]);
        let fm = FeatureMap::<f64>::rff_from_parts(freq, DVector::zeros(3)).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!(fm.featurize(&[0.0, 0.0]).unwrap().iter().all(|v| *v == s));
        assert!(fm.feature_jacobian(&[0.0, 0.0]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rff_entries_match_stored_parameters() {
        let fm = FeatureMap::<f64>::rff(1, 4, 1.0, 0).unwrap();
        let phi = fm.featurize(&[0.5]).unwrap();
        for j in 0..4 {
            let want = 0.5f64.sqrt() * (fm.frequencies()[(j, 0)] * 0.5 + fm.phases()[j]).cos();
            assert_eq!(phi[j], want);
            assert!(phi[j].abs() <= 0.5f64.sqrt());
        }
    }

    #[test]
    fn polynomial_jacobian_matches_fd() {
        let fm = FeatureMap::<f64>::polynomial(2, 3).unwrap();
        let x = [0.7, -1.3];
        let jac = fm.feature_jacobian(&x).unwrap();
        let fd = fd_jacobian(&fm, &x, 1e-5);
        assert!((jac - fd).amax() < 1e-8);
    }

    #[test]
    fn rff_jacobian_matches_finite_differences() {
        let mut rng = seeded_rng(99);
        for trial in 0..100u64 {
            let d = 1 + (trial as usize % 3);
            let fm = FeatureMap::<f64>::rff(d, 8, 1.0 + (trial % 4) as f64 * 0.5, trial).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let jac = fm.feature_jacobian(&x).unwrap();
            let fd = fd_jacobian(&fm, &x, 1e-5);
            assert!((jac - fd).amax() <= 1e-6, "trial {trial}");
        }
    }

    #[test]
    fn rff_self_inner_product_near_one() {
        let fm = FeatureMap::<f64>::rff(3, 4096, 3f64.sqrt(), 11).unwrap();
        let mut rng = seeded_rng(5);
        let mean: f64 = (0..50)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
                fm.featurize(&x).unwrap().norm_squared()
            })
            .sum::<f64>()
            / 50.0;
        assert!((0.95..=1.05).contains(&mean), "mean {mean}");
    }

    #[test]
    fn batch_helpers_match_pointwise() {
        let fm = FeatureMap::<f64>::rff(2, 5, 1.3, 4).unwrap();
        let pts = [0.1, 0.2, -1.0, 0.5, 2.0, -0.3];
        let feats = fm.feature_matrix(&pts).unwrap();
        let slices = fm.jacobian_slices(&pts).unwrap();
        for i in 0..3 {
            let x = &pts[2 * i..2 * i + 2];
            let phi = fm.featurize(x).unwrap();
            let jac = fm.feature_jacobian(x).unwrap();
            for j in 0..5 {
                assert!((feats[(i, j)] - phi[j]).abs() < 1e-15);
                assert!((slices[0][(i, j)] - jac[(0, j)]).abs() < 1e-15);
                assert!((slices[1][(i, j)] - jac[(1, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn batch_linear_forms_match_pointwise() {
        let fm = FeatureMap::<f64>::rff(3, 7, 1.1, 8).unwrap();
        let poly = FeatureMap::<f64>::polynomial(3, 2).unwrap();
        let pts = [0.1, 0.2, 0.3, -1.0, 0.5, 0.0, 2.0, -0.3, 1.2];
        for map in [&fm, &poly] {
            let u = DVector::from_fn(map.dim_out(), |j, _| (j as f64 * 0.7).sin());
            let vals = map.linear_values(&pts, &u).unwrap();
            let grads = map.linear_gradients(&pts, &u).unwrap();
            for i in 0..3 {
                let x = &pts[3 * i..3 * i + 3];
                assert!((vals[i] - map.featurize(x).unwrap().dot(&u)).abs() < 1e-14);
                let g = map.feature_jacobian(x).unwrap() * &u;
                for a in 0..3 {
                    assert!((grads[(i, a)] - g[a]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn f32_map_shares_parameters() {
        let a = FeatureMap::<f32>::rff(2, 6, 1.5, 3).unwrap();
        let b = FeatureMap::<f64>::rff(2, 6, 1.5, 3).unwrap();
        for (x, y) in a.frequencies().iter().zip(b.frequencies().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}

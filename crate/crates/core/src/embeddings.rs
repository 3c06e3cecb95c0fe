//! Weighted particle sets and the empirical statistics computed from them:
//! mean embedding `μ`, (centred) covariance `C_γ`, and the Jacobian Gramian
//! `D`. All three are linear in the particle weights; weights are used as
//! given, without normalization.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result, UsdError};
use crate::features::FeatureMap;
use crate::scalar::Real;

/// Mass-conservation flag `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gamma {
    /// `γ = 0`: second-moment penalty, total mass free to change.
    Unbalanced,
    /// `γ = 1`: variance penalty, total mass conserved.
    Balanced,
}

impl Gamma {
    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(Gamma::Unbalanced),
            1 => Ok(Gamma::Balanced),
            other => Err(UsdError::InvalidParameter(format!("gamma must be 0 or 1, got {other}"))),
        }
    }

    pub fn flag(self) -> u8 {
        match self {
            Gamma::Unbalanced => 0,
            Gamma::Balanced => 1,
        }
    }

    pub fn value<T: Real>(self) -> T {
        match self {
            Gamma::Unbalanced => T::zero(),
            Gamma::Balanced => T::one(),
        }
    }
}

/// A set of `n` points in `R^d` carrying nonnegative masses.
///
/// Points are stored row-major. Total mass need not be one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParticles<T: Real> {
    points: Vec<T>,
    weights: Vec<T>,
    dim: usize,
}

impl<T: Real> WeightedParticles<T> {
    pub fn new(points: Vec<T>, weights: Vec<T>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(UsdError::InvalidDimension("particle dimension must be >= 1".into()));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(UsdError::InvalidParticles(format!(
                "{} coordinates do not split into points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(UsdError::InvalidParticles("particle set is empty".into()));
        }
        check_dim(n, weights.len())?;
        if points.iter().any(|v| !v.is_finite_value()) {
            return Err(UsdError::NonFinite("particle coordinates".into()));
        }
        if weights.iter().any(|w| !w.is_finite_value() || *w < T::zero()) {
            return Err(UsdError::InvalidParticles(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !weights.iter().any(|w| *w > T::zero()) {
            return Err(UsdError::InvalidParticles("at least one weight must be positive".into()));
        }
        Ok(Self { points, weights, dim })
    }

    /// Particles with weights `1/n` each.
    pub fn uniform(points: Vec<T>, dim: usize) -> Result<Self> {
        let n = points.len().checked_div(dim).unwrap_or(0);
        let w = T::one() / T::from_count(n.max(1));
        Self::new(points, vec![w; n], dim)
    }

    /// Builds from one `Vec` per point.
    pub fn from_rows(rows: &[Vec<T>], weights: Vec<T>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(UsdError::InvalidParticles("rows have differing lengths".into()));
        }
        Self::new(rows.concat(), weights, dim)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn total_mass(&self) -> T {
        self.weights.iter().fold(T::zero(), |acc, w| acc + *w)
    }

    /// Same points with every weight multiplied by `c`.
    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.points.clone(), self.weights.iter().map(|w| *w * c).collect(), self.dim)
    }

    /// Same points with weights rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let total = self.total_mass();
        Self {
            points: self.points.clone(),
            weights: self.weights.iter().map(|w| *w / total).collect(),
            dim: self.dim,
        }
    }

    /// Per-coordinate mean of the points weighted by normalized mass.
    pub fn weighted_mean(&self) -> Vec<T> {
        let total = self.total_mass();
        let mut mean = vec![T::zero(); self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (m, x) in mean.iter_mut().zip(self.point(i)) {
                *m += *w * *x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        mean
    }

}

/// Statistics of a source distribution that enter the critic solve.
#[derive(Debug, Clone)]
pub struct EmbeddingSet<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
    pub jac_gramian: DMatrix<T>,
    pub gamma: Gamma,
}

fn check_compatible<T: Real>(p: &WeightedParticles<T>, fm: &FeatureMap<T>) -> Result<()> {
    check_dim(fm.dim_in(), p.dim())
}

/// Scales row `i` of `mat` by `w_i`.
fn scale_rows<T: Real>(mat: &DMatrix<T>, weights: &[T]) -> DMatrix<T> {
    let mut out = mat.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(&DVector::from_column_slice(weights));
    }
    out
}

fn symmetrize<T: Real>(mut m: DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `μ = Σ_j w_j Φ(x_j)`.
pub fn mean_embedding<T: Real>(p: &WeightedParticles<T>, fm: &FeatureMap<T>) -> Result<DVector<T>> {
    check_compatible(p, fm)?;
    let feats = fm.feature_matrix(p.points())?;
    Ok(feats.transpose() * DVector::from_column_slice(p.weights()))
}

/// `C_γ = Σ_j w_j Φ(x_j)Φ(x_j)ᵀ − γ μμᵀ`.
pub fn covariance<T: Real>(
    p: &WeightedParticles<T>,
    fm: &FeatureMap<T>,
    gamma: Gamma,
) -> Result<DMatrix<T>> {
    check_compatible(p, fm)?;
    let feats = fm.feature_matrix(p.points())?;
    Ok(covariance_from_features(&feats, p.weights(), gamma))
}

fn covariance_from_features<T: Real>(feats: &DMatrix<T>, weights: &[T], gamma: Gamma) -> DMatrix<T> {
    let weighted = scale_rows(feats, weights);
    let mut cov = feats.transpose() * weighted;
    if gamma == Gamma::Balanced {
        let mu = feats.transpose() * DVector::from_column_slice(weights);
        cov -= &mu * mu.transpose();
    }
    symmetrize(cov)
}

/// `D = Σ_j w_j JΦ(x_j)ᵀ JΦ(x_j)`.
pub fn jacobian_gramian<T: Real>(p: &WeightedParticles<T>, fm: &FeatureMap<T>) -> Result<DMatrix<T>> {
    check_compatible(p, fm)?;
    let slices = fm.jacobian_slices(p.points())?;
    Ok(gramian_from_slices(&slices, p.weights(), fm.dim_out()))
}

fn gramian_from_slices<T: Real>(slices: &[DMatrix<T>], weights: &[T], m: usize) -> DMatrix<T> {
    let mut gram = DMatrix::zeros(m, m);
    for slice in slices {
        let weighted = scale_rows(slice, weights);
        gram += slice.transpose() * weighted;
    }
    symmetrize(gram)
}

/// `δ = μ(target) − μ(source)`.
pub fn embedding_delta<T: Real>(
    target: &WeightedParticles<T>,
    source: &WeightedParticles<T>,
    fm: &FeatureMap<T>,
) -> Result<DVector<T>> {
    Ok(mean_embedding(target, fm)? - mean_embedding(source, fm)?)
}

/// All source statistics in one pass over the features.
pub fn embedding_set<T: Real>(
    source: &WeightedParticles<T>,
    fm: &FeatureMap<T>,
    gamma: Gamma,
) -> Result<EmbeddingSet<T>> {
    check_compatible(source, fm)?;
    let (feats, slices) = fm.features_and_jacobian_slices(source.points())?;
    let weights = source.weights();
    Ok(EmbeddingSet {
        mean: feats.transpose() * DVector::from_column_slice(weights),
        covariance: covariance_from_features(&feats, weights, gamma),
        jac_gramian: gramian_from_slices(&slices, weights, fm.dim_out()),
        gamma,
    })
}

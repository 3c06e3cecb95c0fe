//! Reference implementations written with plain loops, sharing nothing with
//! the library beyond the sampled RFF parameters.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use usd_core::rng::{seeded_rng, UsdRng};
use usd_core::{FeatureMap, Gamma, WeightedParticles};

pub fn gaussian(rng: &mut UsdRng, n: usize, mean: &[f64], std: f64) -> WeightedParticles<f64> {
    let d = mean.len();
    let mut pts = Vec::with_capacity(n * d);
    for _ in 0..n {
        for m in mean {
            pts.push(m + std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    WeightedParticles::uniform(pts, d).unwrap()
}

pub fn gaussian_seeded(n: usize, mean: &[f64], std: f64, seed: u64) -> WeightedParticles<f64> {
    gaussian(&mut seeded_rng(seed), n, mean, std)
}

/// Equal mixture of isotropic Gaussians, component picked per point.
pub fn mixture(rng: &mut UsdRng, n: usize, centers: &[[f64; 2]], std: f64) -> WeightedParticles<f64> {
    let mut pts = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..centers.len())];
        for m in c {
            pts.push(m + std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    WeightedParticles::uniform(pts, 2).unwrap()
}

/// Random positive weights summing to one.
pub fn random_weights(rng: &mut UsdRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

pub fn reweighted(p: &WeightedParticles<f64>, rng: &mut UsdRng) -> WeightedParticles<f64> {
    WeightedParticles::new(p.points().to_vec(), random_weights(rng, p.len()), p.dim()).unwrap()
}

fn angle(fm: &FeatureMap<f64>, j: usize, x: &[f64]) -> f64 {
    let w = fm.frequencies();
    fm.phases()[j] + x.iter().enumerate().map(|(a, xa)| w[(j, a)] * xa).sum::<f64>()
}

fn rff_scale(fm: &FeatureMap<f64>) -> f64 {
    (2.0 / fm.dim_out() as f64).sqrt()
}

pub fn features(fm: &FeatureMap<f64>, x: &[f64]) -> Vec<f64> {
    let s = rff_scale(fm);
    (0..fm.dim_out()).map(|j| s * angle(fm, j, x).cos()).collect()
}

/// `∂Φ_j/∂x_a`, indexed `[j][a]`.
pub fn jacobian(fm: &FeatureMap<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let s = rff_scale(fm);
    let w = fm.frequencies();
    (0..fm.dim_out())
        .map(|j| {
            let c = -s * angle(fm, j, x).sin();
            (0..x.len()).map(|a| c * w[(j, a)]).collect()
        })
        .collect()
}

pub fn mean_embedding(p: &WeightedParticles<f64>, fm: &FeatureMap<f64>) -> Vec<f64> {
    let mut mu = vec![0.0; fm.dim_out()];
    for i in 0..p.len() {
        for (m, f) in mu.iter_mut().zip(features(fm, p.point(i))) {
            *m += p.weights()[i] * f;
        }
    }
    mu
}

pub fn delta(target: &WeightedParticles<f64>, source: &WeightedParticles<f64>, fm: &FeatureMap<f64>) -> DVector<f64> {
    let a = mean_embedding(target, fm);
    let b = mean_embedding(source, fm);
    DVector::from_iterator(a.len(), a.iter().zip(&b).map(|(x, y)| x - y))
}

/// `D`, `C_γ` built entry by entry.
pub fn gramians(source: &WeightedParticles<f64>, fm: &FeatureMap<f64>, gamma: Gamma) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = fm.dim_out();
    let mut d = DMatrix::zeros(m, m);
    let mut c = DMatrix::zeros(m, m);
    for i in 0..source.len() {
        let w = source.weights()[i];
        let x = source.point(i);
        let f = features(fm, x);
        let jac = jacobian(fm, x);
        for r in 0..m {
            for s in 0..m {
                c[(r, s)] += w * f[r] * f[s];
                d[(r, s)] += w * jac[r].iter().zip(&jac[s]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    if gamma == Gamma::Balanced {
        let mu = mean_embedding(source, fm);
        for r in 0..m {
            for s in 0..m {
                c[(r, s)] -= mu[r] * mu[s];
            }
        }
    }
    (d, c)
}

pub fn system(source: &WeightedParticles<f64>, fm: &FeatureMap<f64>, alpha: f64, lambda: f64, gamma: Gamma) -> DMatrix<f64> {
    let (d, c) = gramians(source, fm, gamma);
    d + c * alpha + DMatrix::identity(fm.dim_out(), fm.dim_out()) * lambda
}

/// Critic coefficients by LU on the oracle system.
pub fn critic(
    target: &WeightedParticles<f64>,
    source: &WeightedParticles<f64>,
    fm: &FeatureMap<f64>,
    alpha: f64,
    lambda: f64,
    gamma: Gamma,
) -> (DVector<f64>, DVector<f64>) {
    let delta = delta(target, source, fm);
    let u = system(source, fm, alpha, lambda, gamma).lu().solve(&delta).unwrap();
    (u, delta)
}

pub fn kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * sigma * sigma)).exp()
}

/// Exact weighted MMD² by the kernel double sum.
pub fn exact_mmd2(p: &WeightedParticles<f64>, q: &WeightedParticles<f64>, sigma: f64) -> f64 {
    let cross = |a: &WeightedParticles<f64>, b: &WeightedParticles<f64>| {
        let mut s = 0.0;
        for i in 0..a.len() {
            for j in 0..b.len() {
                s += a.weights()[i] * b.weights()[j] * kernel(a.point(i), b.point(j), sigma);
            }
        }
        s
    };
    cross(p, p) + cross(q, q) - 2.0 * cross(p, q)
}

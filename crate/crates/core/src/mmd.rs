//! Squared maximum mean discrepancy in a finite feature space,
//! `MMD²(p, q) = |μ(p) − μ(q)|²`, computed on weights as given.

use crate::embeddings::{mean_embedding, WeightedParticles};
use crate::error::Result;
use crate::features::FeatureMap;
use crate::scalar::Real;

/// Number of random features in the evaluation map.
pub const EVAL_FEATURES: usize = 300;

pub fn mmd2<T: Real>(p: &WeightedParticles<T>, q: &WeightedParticles<T>, fm: &FeatureMap<T>) -> Result<T> {
    let diff = mean_embedding(p, fm)? - mean_embedding(q, fm)?;
    Ok(diff.norm_squared())
}

/// Evaluation feature map: 300 random features with bandwidth `sqrt(d)`.
pub fn evaluation_map<T: Real>(d: usize, seed: u64) -> Result<FeatureMap<T>> {
    FeatureMap::rff_default_bandwidth(d, EVAL_FEATURES, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::seeded_rng;

    fn cloud(n: usize, shift: f64, seed: u64) -> WeightedParticles<f64> {
        let mut rng = seeded_rng(seed);
        let pts = (0..2 * n).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        WeightedParticles::uniform(pts, 2).unwrap()
    }

    #[test]
    fn trivial_values() {
        let id = FeatureMap::identity(1).unwrap();
        let p = WeightedParticles::new(vec![2.0], vec![1.0], 1).unwrap();
        let q = WeightedParticles::new(vec![0.0], vec![1.0], 1).unwrap();
        assert_eq!(mmd2(&p, &q, &id).unwrap(), 4.0);
        assert_eq!(mmd2(&p, &p, &id).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let fm = evaluation_map::<f64>(2, 1).unwrap();
        let (p, q) = (cloud(30, 0.0, 1), cloud(40, 0.5, 2));
        let a = mmd2(&p, &q, &fm).unwrap();
        assert_eq!(a, mmd2(&q, &p, &fm).unwrap());
        assert!(a >= -1e-14);
        assert_eq!(fm.dim_out(), 300);
        assert!((fm.bandwidth() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn triangle_inequality() {
        let fm = evaluation_map::<f64>(2, 3).unwrap();
        for s in 0..10 {
            let (a, b, c) = (cloud(20, 0.0, s), cloud(25, 0.4, s + 100), cloud(15, -0.3, s + 200));
            let ab = mmd2(&a, &b, &fm).unwrap().sqrt();
            let bc = mmd2(&b, &c, &fm).unwrap().sqrt();
            let ac = mmd2(&a, &c, &fm).unwrap().sqrt();
            assert!(ac <= ab + bc + 1e-10);
        }
    }
}

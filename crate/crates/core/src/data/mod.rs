//! Synthetic shapes, point-cloud files and images as weighted particles.

mod image;
mod point_cloud;

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::WeightedParticles;
use crate::error::{Result, UsdError};
use crate::rng::UsdRng;
use crate::scalar::Real;

pub use self::image::{image_to_particles, load_rgb8, particles_to_image, particles_to_rgb, rgb_to_particles};
pub use point_cloud::{load_point_cloud, read_point_cloud, save_point_cloud, write_point_cloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    /// Per-coordinate variances.
    pub cov_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Gaussian(GaussianSpec),
    Mog {
        components: Vec<GaussianSpec>,
        weights: Vec<f64>,
    },
    /// Uniform over a union of 2-D annuli; each ring is picked with
    /// probability proportional to its radius.
    Rings {
        centers: Vec<[f64; 2]>,
        radii: Vec<f64>,
        thickness: f64,
    },
    PointCloud {
        path: PathBuf,
    },
    /// Uniform inside the dark pixels of an image (light pixels with
    /// `invert`), mapped to `[-1, 1]` along the longer side.
    ImageMask {
        path: PathBuf,
        #[serde(default)]
        invert: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// Weight interpolated linearly from `lo` to `hi` across the sample's
    /// extent along `axis`.
    LinearGradient { axis: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    /// Sample count. Point clouds larger than `n` are subsampled.
    pub n: usize,
    /// Defaults to uniform, or to the file's weights for point clouds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_mode: Option<WeightMode>,
    /// Rescale weights to sum to one.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, n: usize) -> Self {
        Self {
            kind,
            n,
            weight_mode: None,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UsdError::InvalidParameter(msg));
        if self.n == 0 {
            return bad("shape sample count must be >= 1".into());
        }
        match &self.kind {
            ShapeKind::Gaussian(g) => validate_gaussian(g)?,
            ShapeKind::Mog { components, weights } => {
                if components.is_empty() || components.len() != weights.len() {
                    return bad("mixture needs one weight per component".into());
                }
                let d = components[0].mean.len();
                for c in components {
                    validate_gaussian(c)?;
                    if c.mean.len() != d {
                        return bad("mixture components differ in dimension".into());
                    }
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return bad("mixture weights must be nonnegative".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("mixture weights must sum to 1, got {total}"));
                }
            }
            ShapeKind::Rings {
                centers,
                radii,
                thickness,
            } => {
                if centers.is_empty() || centers.len() != radii.len() {
                    return bad("rings need one radius per center".into());
                }
                if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) || centers.iter().flatten().any(|c| !c.is_finite()) {
                    return bad("ring radii must be > 0 and centers finite".into());
                }
                if !(thickness.is_finite() && *thickness >= 0.0) {
                    return bad(format!("ring thickness must be >= 0, got {thickness}"));
                }
            }
            ShapeKind::PointCloud { .. } | ShapeKind::ImageMask { .. } => {}
        }
        if let Some(WeightMode::LinearGradient { lo, hi, .. }) = &self.weight_mode {
            if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && *hi >= 0.0 && lo.max(*hi) > 0.0) {
                return bad(format!("gradient weights need lo, hi >= 0 and not both 0, got {lo}, {hi}"));
            }
        }
        Ok(())
    }
}

fn validate_gaussian(g: &GaussianSpec) -> Result<()> {
    if g.mean.is_empty() || g.mean.len() != g.cov_diag.len() {
        return Err(UsdError::InvalidParameter(
            "gaussian mean and cov_diag must have equal nonzero length".into(),
        ));
    }
    if g.mean.iter().any(|m| !m.is_finite()) || g.cov_diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(UsdError::InvalidParameter(
            "gaussian mean must be finite and variances >= 0".into(),
        ));
    }
    Ok(())
}

fn push_gaussian(g: &GaussianSpec, rng: &mut UsdRng, out: &mut Vec<f64>) {
    for (m, v) in g.mean.iter().zip(&g.cov_diag) {
        let z: f64 = rng.sample(StandardNormal);
        out.push(m + v.sqrt() * z);
    }
}

/// Index drawn with probability proportional to `weights`.
fn categorical(weights: &[f64], rng: &mut UsdRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_mask(path: &std::path::Path, invert: bool, n: usize, rng: &mut UsdRng) -> Result<Vec<f64>> {
    let img = load_rgb8(path)?;
    let (w, h) = img.dimensions();
    let inside = |x: u32, y: u32| {
        let [r, g, b] = img.get_pixel(x, y).0;
        let luma = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
        (luma < 128.0) != invert
    };
    let count = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| inside(x, y)).count();
    if count == 0 {
        return Err(UsdError::InvalidParticles(format!("mask {} has no inside pixels", path.display())));
    }
    let side = f64::from(w.max(h));
    let mut out = Vec::with_capacity(2 * n);
    while out.len() < 2 * n {
        let x = rng.random::<f64>() * f64::from(w);
        let y = rng.random::<f64>() * f64::from(h);
        if inside(x as u32, y as u32) {
            // y grows upward; centered, longer side spans [-1, 1]
            out.push((2.0 * x - f64::from(w)) / side);
            out.push((f64::from(h) - 2.0 * y) / side);
        }
    }
    Ok(out)
}

fn apply_weight_mode(points: &[f64], dim: usize, mode: &WeightMode) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    match mode {
        WeightMode::Uniform => Ok(vec![1.0 / n as f64; n]),
        WeightMode::LinearGradient { axis, lo, hi } => {
            if *axis >= dim {
                return Err(UsdError::InvalidParameter(format!("gradient axis {axis} >= dimension {dim}")));
            }
            let coord = |i: usize| points[i * dim + axis];
            let (min, max) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| (a.min(coord(i)), b.max(coord(i))));
            Ok((0..n)
                .map(|i| {
                    let t = if max > min { (coord(i) - min) / (max - min) } else { 0.5 };
                    lo + (hi - lo) * t
                })
                .collect())
        }
    }
}

/// Draws the particles described by `spec`. Deterministic given `rng`.
pub fn sample_shape<T: Real>(spec: &ShapeSpec, rng: &mut UsdRng) -> Result<WeightedParticles<T>> {
    spec.validate()?;
    let n = spec.n;
    let (points, dim, file_weights) = match &spec.kind {
        ShapeKind::Gaussian(g) => {
            let mut pts = Vec::with_capacity(n * g.mean.len());
            for _ in 0..n {
                push_gaussian(g, rng, &mut pts);
            }
            (pts, g.mean.len(), None)
        }
        ShapeKind::Mog { components, weights } => {
            let dim = components[0].mean.len();
            let mut pts = Vec::with_capacity(n * dim);
            for _ in 0..n {
                push_gaussian(&components[categorical(weights, rng)], rng, &mut pts);
            }
            (pts, dim, None)
        }
        ShapeKind::Rings {
            centers,
            radii,
            thickness,
        } => {
            let mut pts = Vec::with_capacity(2 * n);
            let jitter = Normal::new(0.0, *thickness).map_err(|e| UsdError::InvalidParameter(e.to_string()))?;
            for _ in 0..n {
                let k = categorical(radii, rng);
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let r = radii[k] + jitter.sample(rng);
                pts.push(centers[k][0] + r * angle.cos());
                pts.push(centers[k][1] + r * angle.sin());
            }
            (pts, 2, None)
        }
        ShapeKind::PointCloud { path } => {
            let cloud = load_point_cloud::<f64>(path)?;
            let dim = cloud.dim();
            if cloud.len() > n {
                let mut idx: Vec<usize> = sample(rng, cloud.len(), n).into_vec();
                idx.sort_unstable();
                let pts = idx.iter().flat_map(|&i| cloud.point(i).iter().copied()).collect();
                let w = idx.iter().map(|&i| cloud.weights()[i]).collect();
                (pts, dim, Some(w))
            } else {
                (cloud.points().to_vec(), dim, Some(cloud.weights().to_vec()))
            }
        }
        ShapeKind::ImageMask { path, invert } => (sample_mask(path, *invert, n, rng)?, 2, None),
    };
    let mode = match (&spec.weight_mode, &file_weights) {
        (Some(mode), _) => Some(mode),
        (None, Some(_)) => None,
        (None, None) => Some(&WeightMode::Uniform),
    };
    let mut weights = match mode {
        Some(mode) => apply_weight_mode(&points, dim, mode)?,
        None => file_weights.expect("file weights present"),
    };
    // uniform weights are exactly 1/n already; dividing by their float sum
    // would perturb them
    if spec.normalize && mode != Some(&WeightMode::Uniform) {
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
    }
    WeightedParticles::new(
        points.into_iter().map(T::lit).collect(),
        weights.into_iter().map(T::lit).collect(),
        dim,
    )
}

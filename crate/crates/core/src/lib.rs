//! Unbalanced Sobolev Descent.
//!
//! Moves a weighted source point cloud toward a target point cloud by
//! alternating two steps:
//!
//! * **advection**: every particle moves along the gradient of a
//!   Sobolev-Fisher critic;
//! * **reaction**: particle masses grow or shrink with the critic value,
//!   either by log-domain reweighing or by a birth-death process.
//!
//! The critic is available in closed form over random Fourier features
//! ([`sobolev_fisher`]) or as a small neural network trained with an
//! augmented Lagrangian ([`neural_critic`]). Convergence is tracked with the
//! squared MMD ([`mmd`]).
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below name the usual double-precision instantiations.

pub mod data;
pub mod descent;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod mmd;
pub mod neural_critic;
pub mod rng;
pub mod scalar;
pub mod selfcheck;
pub mod sobolev_fisher;

pub use embeddings::{Gamma, WeightedParticles};
pub use error::{Result, UsdError};
pub use features::FeatureMap;
pub use scalar::Real;
pub use sobolev_fisher::{KernelCritic, SfParams};

pub type WeightedParticles64 = WeightedParticles<f64>;
pub type WeightedParticles32 = WeightedParticles<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type FeatureMap32 = FeatureMap<f32>;
pub type SfParams64 = SfParams<f64>;
pub type KernelCritic64<'a> = KernelCritic<'a, f64>;
pub type DescentTrace64 = descent::DescentTrace<f64>;
pub type DescentConfig64 = descent::DescentConfig<f64>;
pub type NeuralCritic64 = neural_critic::NeuralCritic<f64>;
pub type NeuralCritic32 = neural_critic::NeuralCritic<f32>;

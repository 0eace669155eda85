//! Out-of-manifold mixup for small transformer text classifiers.
//!
//! A from-scratch lab for studying mixup in contextual embedding space: a
//! tape-based autodiff core, a compact transformer encoder, the embedding
//! generator / manifold discriminator pair with their scoped joint
//! objective, classical mixup baselines, and the analysis tooling (mixing
//! coefficient histograms, variance coverage, Isomap projections) used to
//! probe where the mixed embeddings land.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod oommix;
pub mod trainer;

pub use error::{Error, Result};

//! Generalized category discovery over precomputed vision-language embeddings.
//!
//! The pipeline has two phases. Spectral filtering ([`spectral`]) picks the
//! task-relevant subset of a large concept dictionary from the covariance of a
//! teacher's softmaxed image–concept similarities. Training ([`trainer`]) then
//! fits a small head on the student's similarities to the retained concepts,
//! with contrastive, parametric and teacher distillation objectives
//! ([`losses`]). [`evaluation`] scores the result with Hungarian-matched
//! clustering accuracy.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod pipeline;
pub mod real;
pub mod representation;
pub mod seed;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

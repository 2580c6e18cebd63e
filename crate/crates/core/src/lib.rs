//! Inverse problems over generative radiance fields.
//!
//! Given corrupted 2-D measurements of a single known camera view, the solver
//! recovers style parameters of a latent-conditioned radiance field whose
//! rendering explains the measurements, while a soft-min prior over a curated
//! set of reference density grids keeps the recovered 3-D geometry free of
//! off-surface obstructions.
//!
//! Module map:
//! - [`generator`]: SIREN and analytic blob radiance fields with hand-written backprop.
//! - [`renderer`]: cameras and differentiable volume rendering.
//! - [`geometry`]: voxelization, marching cubes and surface masks.
//! - [`regularizer`]: masked distances, soft-min prior, annealing and baseline regularizers.
//! - [`operators`]: forward operators and measurement synthesis.
//! - [`inversion`]: total loss, Adam, result selection and gradient checks.
//! - [`curation`]: view scoring and good/bad partitioning of candidate latents.
//! - [`harness`]: configuration, persistence, metrics and experiment runners.

pub mod curation;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod harness;
pub mod inversion;
pub mod math;
pub mod operators;
pub mod regularizer;
pub mod renderer;

pub use error::{Error, Result};

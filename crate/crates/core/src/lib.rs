//! Implicit multi-organ surface reconstruction from volumetric images.
//!
//! A 3D convolutional encoder turns a voxel grid into a feature pyramid; per-organ
//! implicit decoders map trilinearly interpolated features at continuous query
//! points to occupancy. Surfaces are extracted from dense or patch-blended
//! occupancy grids with marching cubes and scored with HD90, ASSD, Chamfer and IoU.
//! Synthetic scenes with analytic signed-distance oracles stand in for clinical
//! data so every stage can be checked exactly.

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};

//! Sparse neural radiance grids.
//!
//! A continuous scene function (density, diffuse colour and a small feature
//! vector per point) is baked into a block-sparse voxel grid: a coarse
//! indirection grid pointing into a packed atlas of macroblocks. The grid is
//! rendered by ray marching with empty-block skipping and early termination,
//! accumulating diffuse colour and features front to back, and a tiny MLP
//! adds a view-dependent residual once per pixel.
//!
//! Module map:
//! - [`math`]: rays, cameras, positional encoding and the compositing quadrature.
//! - [`scene`]: the scene-function contract, built-in analytic scenes and the
//!   deferred shading MLP.
//! - [`baker`]: scene function to culled, anti-aliased block-sparse grid.
//! - [`store`]: the grid container, 8-bit quantization and bundle files.
//! - [`renderer`]: CPU reference ray marcher and orbit benchmark.
//! - [`finetune`]: backpropagation and Adam for the shading MLP.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baker;
mod error;
pub mod finetune;
pub mod image;
pub mod math;
mod par;
pub mod renderer;
pub mod scene;
pub mod store;

pub use error::{Error, Result};
pub use glam;
pub use glam::{DVec3, DVec4};

//! Particle-based fluid stylization.
//!
//! This crate optimizes per-particle attributes (density, color, position)
//! of a fluid so that differentiable renderings of the particle-splatted
//! field match the texture statistics of a reference image. It provides:
//!
//! * dense grid / particle / image containers ([`grid`], [`particles`],
//!   [`image`]),
//! * differentiable particle-grid transfers with hand-written adjoints
//!   ([`transfer`]),
//! * orthographic emission-absorption and transmittance renderers
//!   ([`render`]),
//! * a loadable convolutional filter bank with Gram-matrix style loss and
//!   mass/distribution regularizers ([`bank`], [`style`]),
//! * the per-frame and per-sequence attribute optimizer with temporal
//!   smoothing and keyframe interpolation ([`stylize`], [`adam`]),
//! * particle re-sampling from grid simulations with multi-scale density
//!   reconstruction ([`resim`]),
//! * binary file formats, PNG and JSON config I/O ([`io`]).
//!
//! All numerics are in `f64`; operations are pure functions over
//! immutable-after-construction containers and are deterministic, so a
//! fixed seed reproduces runs bit for bit.

pub mod adam;
pub mod bank;
pub mod error;
pub mod fixtures;
pub mod grid;
pub mod image;
pub mod io;
pub mod kernel;
pub mod particles;
pub mod render;
pub mod resim;
pub mod style;
pub mod stylize;
pub mod transfer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use grid::{GridSpec, ScalarGrid, VectorGrid};
pub use image::Image;
pub use particles::ParticleSet;

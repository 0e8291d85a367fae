//! Particle containers: positions plus named per-particle attribute channels.
//!
//! Reserved channel names: `rho0`..`rho{n}` for multi-level densities,
//! `mass`, `color_r`/`color_g`/`color_b`, and `delta` for stylization
//! density changes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const CH_MASS: &str = "mass";
pub const CH_COLOR_R: &str = "color_r";
pub const CH_COLOR_G: &str = "color_g";
pub const CH_COLOR_B: &str = "color_b";
pub const CH_DELTA: &str = "delta";

/// Name of the level-`i` density channel (`rho0`, `rho1`, ...).
pub fn rho_channel(level: usize) -> String {
    format!("rho{level}")
}

/// A set of `count` particles in 2 or 3 dimensions. Positions are stored
/// flat, particle-major (`particle * dim + axis`); channels are kept in a
/// sorted map so iteration order is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    count: usize,
    dim: usize,
    positions: Vec<f64>,
    channels: BTreeMap<String, Vec<f64>>,
}

impl ParticleSet {
    pub fn new(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("particle dim must be 2 or 3, got {dim}")));
        }
        if positions.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "positions length {} is not a multiple of dim {dim}",
                positions.len()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("particle positions must be finite"));
        }
        Ok(ParticleSet {
            count: positions.len() / dim,
            dim,
            positions,
            channels: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Position of particle `p` as a 3-vector (z = 0 in 2D).
    pub fn position(&self, p: usize) -> [f64; 3] {
        let base = p * self.dim;
        let mut out = [0.0; 3];
        out[..self.dim].copy_from_slice(&self.positions[base..base + self.dim]);
        out
    }

    /// Replace all positions, keeping channels.
    pub fn set_positions(&mut self, positions: Vec<f64>) -> Result<()> {
        if positions.len() != self.count * self.dim {
            return Err(Error::invalid(format!(
                "expected {} position scalars, got {}",
                self.count * self.dim,
                positions.len()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("particle positions must be finite"));
        }
        self.positions = positions;
        Ok(())
    }

    pub fn set_channel(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.count {
            return Err(Error::invalid(format!(
                "channel {name:?} has length {}, expected {} (one value per particle)",
                values.len(),
                self.count
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("channel {name:?} must be finite")));
        }
        if name == CH_MASS && values.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("mass channel must be strictly positive"));
        }
        self.channels.insert(name, values);
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channels.contains_key(name)
    }

    /// Channel names in sorted order.
    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }
}

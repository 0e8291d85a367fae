//! Dense regular grids over a Cartesian domain.
//!
//! Values live at cell centers. The node `(i, j, k)` sits at
//! `origin + spacing * (i, j, k)` in world units, and the flat storage is
//! x-fastest: `index = i + nx * (j + ny * k)`. A grid with `nz == 1` is
//! treated as two-dimensional everywhere in this crate (positions carry two
//! coordinates, kernels use 2D distances).

use crate::error::{Error, Result};

/// Geometry of a regular grid: resolution, cell size and the world
/// position of node `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: f64, origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::invalid(format!("grid spacing must be > 0, got {spacing}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(GridSpec { dims, spacing, origin })
    }

    /// Total node count `nx * ny * nz`.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial dimension: 2 when the grid is a single z-slice, 3 otherwise.
    pub fn dim(&self) -> usize {
        if self.dims[2] == 1 {
            2
        } else {
            3
        }
    }

    /// Flat index of node `(i, j, k)`, x-fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        (i, j, k)
    }

    /// World position of node `(i, j, k)`.
    #[inline]
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing * i as f64,
            self.origin[1] + self.spacing * j as f64,
            self.origin[2] + self.spacing * k as f64,
        ]
    }
}

/// Dense scalar field on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::invalid(format!(
                "scalar grid expects {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("scalar grid values must be finite"));
        }
        Ok(ScalarGrid { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.len();
        ScalarGrid { spec, values: vec![0.0; n] }
    }

    pub fn constant(spec: GridSpec, value: f64) -> Result<Self> {
        let n = spec.len();
        Self::new(spec, vec![value; n])
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.index(i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        let idx = self.spec.index(i, j, k);
        &mut self.values[idx]
    }
}

/// Dense vector field; `components` values per node, stored node-major
/// (`node_index * components + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid {
    pub spec: GridSpec,
    pub components: usize,
    pub values: Vec<f64>,
}

impl VectorGrid {
    pub fn new(spec: GridSpec, components: usize, values: Vec<f64>) -> Result<Self> {
        if components != spec.dim() {
            return Err(Error::invalid(format!(
                "vector grid components ({components}) must equal the spatial dimension ({})",
                spec.dim()
            )));
        }
        if values.len() != spec.len() * components {
            return Err(Error::invalid(format!(
                "vector grid expects {} values, got {}",
                spec.len() * components,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector grid values must be finite"));
        }
        Ok(VectorGrid { spec, components, values })
    }

    /// Borrow one component as a strided iterator-friendly copy.
    pub fn component(&self, c: usize) -> Vec<f64> {
        assert!(c < self.components);
        self.values.iter().skip(c).step_by(self.components).copied().collect()
    }
}

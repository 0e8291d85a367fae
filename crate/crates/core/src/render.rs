//! Differentiable image formation from density grids.
//!
//! Views are axis-aligned orthographic projections; the ray through a pixel
//! visits one grid node per cell with step length equal to the grid
//! spacing. Two formation models are provided, both with analytic adjoints:
//!
//! ```text
//! liquid:  tau = exp(-gamma * Σ_k d_k Δr),  I = 1 - tau
//! smoke:   I = Σ_k  e_k * d_k * Δr * T_k,   T_k = exp(-gamma * Δr * Σ_{m<k} d_m)
//! ```
//!
//! with `e_k` the emission (a constant for grayscale smoke, density-carried
//! color for the RGB variant). Negative densities clamp to zero inside the
//! renderer and carry zero gradient there.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarGrid};
use crate::image::Image;

/// Orthographic projection direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    XPos,
    XNeg,
    YPos,
    YNeg,
    ZPos,
    ZNeg,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis> {
        match s {
            "+x" => Ok(Axis::XPos),
            "-x" => Ok(Axis::XNeg),
            "+y" => Ok(Axis::YPos),
            "-y" => Ok(Axis::YNeg),
            "+z" => Ok(Axis::ZPos),
            "-z" => Ok(Axis::ZNeg),
            other => Err(Error::invalid(format!(
                "unknown view axis {other:?} (expected one of +x -x +y -y +z -z)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::XPos => "+x",
            Axis::XNeg => "-x",
            Axis::YPos => "+y",
            Axis::YNeg => "-y",
            Axis::ZPos => "+z",
            Axis::ZNeg => "-z",
        }
    }
}

/// A single orthographic view. Image dimensions derive from the two grid
/// axes transverse to the projection direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewConfig {
    pub axis: Axis,
}

/// Image formation model selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Smoke,
    Liquid,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    pub mode: RenderMode,
    /// Extinction coefficient, > 0.
    pub gamma: f64,
    /// Emission scale for the smoke model, >= 0.
    pub emission: f64,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        if !(self.emission.is_finite() && self.emission >= 0.0) {
            return Err(Error::invalid(format!("emission must be >= 0, got {}", self.emission)));
        }
        Ok(())
    }
}

/// Pixels and ray geometry for a view over `spec`: image width/height,
/// sample count per ray, and (start index, index stride) per pixel.
struct RayLayout {
    width: usize,
    height: usize,
    steps: usize,
    px_stride: usize,
    py_stride: usize,
    start0: usize,
    step_stride: isize,
}

fn ray_layout(spec: &GridSpec, view: ViewConfig) -> Result<RayLayout> {
    let [nx, ny, nz] = spec.dims;
    if nz == 1 && !matches!(view.axis, Axis::ZPos | Axis::ZNeg) {
        return Err(Error::invalid(format!(
            "view axis {} is not valid for a 2D grid (use +z or -z)",
            view.axis.name()
        )));
    }
    // Flat index = i + nx * (j + ny * k).
    let (width, height, steps, px_stride, py_stride, march) = match view.axis {
        Axis::XPos | Axis::XNeg => (ny, nz, nx, nx, nx * ny, 1usize),
        Axis::YPos | Axis::YNeg => (nx, nz, ny, 1, nx * ny, nx),
        Axis::ZPos | Axis::ZNeg => (nx, ny, nz, 1, nx, nx * ny),
    };
    let forward = matches!(view.axis, Axis::XPos | Axis::YPos | Axis::ZPos);
    let (start0, step_stride) = if forward {
        (0usize, march as isize)
    } else {
        (march * (steps - 1), -(march as isize))
    };
    Ok(RayLayout { width, height, steps, px_stride, py_stride, start0, step_stride })
}

impl RayLayout {
    #[inline]
    fn sample_index(&self, px: usize, py: usize, step: usize) -> usize {
        (self.start0 as isize
            + (px * self.px_stride + py * self.py_stride) as isize
            + self.step_stride * step as isize) as usize
    }
}

/// Transmittance renderer for liquids: `I = 1 - exp(-gamma ∫ d dr)`.
pub fn render_liquid(grid: &ScalarGrid, view: ViewConfig, config: &RenderConfig) -> Result<Image> {
    config.validate()?;
    let lay = ray_layout(&grid.spec, view)?;
    let dr = grid.spec.spacing;
    let mut pixels = vec![0.0; lay.width * lay.height];
    for py in 0..lay.height {
        for px in 0..lay.width {
            let mut depth = 0.0;
            for s in 0..lay.steps {
                depth += grid.values[lay.sample_index(px, py, s)].max(0.0);
            }
            pixels[py * lay.width + px] = 1.0 - (-config.gamma * depth * dr).exp();
        }
    }
    Image::new(lay.width, lay.height, 1, pixels)
}

/// Adjoint of [`render_liquid`] with respect to the density grid.
pub fn render_liquid_backward(
    grid: &ScalarGrid,
    view: ViewConfig,
    config: &RenderConfig,
    grad_image: &Image,
) -> Result<ScalarGrid> {
    config.validate()?;
    let lay = ray_layout(&grid.spec, view)?;
    if grad_image.width != lay.width || grad_image.height != lay.height || grad_image.channels != 1 {
        return Err(Error::ShapeMismatch("grad image does not match liquid render".into()));
    }
    let dr = grid.spec.spacing;
    let mut grad = ScalarGrid::zeros(grid.spec.clone());
    for py in 0..lay.height {
        for px in 0..lay.width {
            let g = grad_image.pixels[py * lay.width + px];
            if g == 0.0 {
                continue;
            }
            let mut depth = 0.0;
            for s in 0..lay.steps {
                depth += grid.values[lay.sample_index(px, py, s)].max(0.0);
            }
            let tau = (-config.gamma * depth * dr).exp();
            let d_all = g * config.gamma * dr * tau;
            for s in 0..lay.steps {
                let idx = lay.sample_index(px, py, s);
                if grid.values[idx] >= 0.0 {
                    grad.values[idx] += d_all;
                }
            }
        }
    }
    Ok(grad)
}

/// Front-to-back emission-absorption renderer for smoke.
pub fn render_smoke(grid: &ScalarGrid, view: ViewConfig, config: &RenderConfig) -> Result<Image> {
    config.validate()?;
    let lay = ray_layout(&grid.spec, view)?;
    let dr = grid.spec.spacing;
    let mut pixels = vec![0.0; lay.width * lay.height];
    for py in 0..lay.height {
        for px in 0..lay.width {
            let mut t = 1.0;
            let mut intensity = 0.0;
            for s in 0..lay.steps {
                let d = grid.values[lay.sample_index(px, py, s)].max(0.0);
                intensity += config.emission * d * dr * t;
                t *= (-config.gamma * d * dr).exp();
            }
            pixels[py * lay.width + px] = intensity;
        }
    }
    Image::new(lay.width, lay.height, 1, pixels)
}

/// Adjoint of [`render_smoke`] with respect to the density grid.
///
/// With emissions `e_k = emission * d_k * Δr * T_k`:
///
/// ```text
/// dI/dd_j = emission * Δr * T_j - gamma * Δr * Σ_{k>j} e_k
/// ```
pub fn render_smoke_backward(
    grid: &ScalarGrid,
    view: ViewConfig,
    config: &RenderConfig,
    grad_image: &Image,
) -> Result<ScalarGrid> {
    config.validate()?;
    let lay = ray_layout(&grid.spec, view)?;
    if grad_image.width != lay.width || grad_image.height != lay.height || grad_image.channels != 1 {
        return Err(Error::ShapeMismatch("grad image does not match smoke render".into()));
    }
    let dr = grid.spec.spacing;
    let mut grad = ScalarGrid::zeros(grid.spec.clone());
    let mut trans = vec![0.0; lay.steps];
    let mut emit = vec![0.0; lay.steps];
    for py in 0..lay.height {
        for px in 0..lay.width {
            let g = grad_image.pixels[py * lay.width + px];
            if g == 0.0 {
                continue;
            }
            let mut t = 1.0;
            for s in 0..lay.steps {
                let d = grid.values[lay.sample_index(px, py, s)].max(0.0);
                trans[s] = t;
                emit[s] = config.emission * d * dr * t;
                t *= (-config.gamma * d * dr).exp();
            }
            let mut suffix = 0.0;
            for s in (0..lay.steps).rev() {
                let idx = lay.sample_index(px, py, s);
                if grid.values[idx] >= 0.0 {
                    grad.values[idx] += g * (config.emission * dr * trans[s] - config.gamma * dr * suffix);
                }
                suffix += emit[s];
            }
        }
    }
    Ok(grad)
}

/// Emission-absorption rendering with per-sample color: channel `c` of a
/// pixel accumulates `emission * d_k * c_k * Δr * T_k`.
pub fn render_color(
    density: &ScalarGrid,
    color: [&ScalarGrid; 3],
    view: ViewConfig,
    config: &RenderConfig,
) -> Result<Image> {
    config.validate()?;
    for ch in &color {
        if ch.spec != density.spec {
            return Err(Error::ShapeMismatch("color grid does not match density grid".into()));
        }
    }
    let lay = ray_layout(&density.spec, view)?;
    let dr = density.spec.spacing;
    let mut pixels = vec![0.0; lay.width * lay.height * 3];
    for py in 0..lay.height {
        for px in 0..lay.width {
            let mut t = 1.0;
            let mut acc = [0.0; 3];
            for s in 0..lay.steps {
                let idx = lay.sample_index(px, py, s);
                let d = density.values[idx].max(0.0);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += config.emission * d * color[c].values[idx].max(0.0) * dr * t;
                }
                t *= (-config.gamma * d * dr).exp();
            }
            let base = (py * lay.width + px) * 3;
            pixels[base..base + 3].copy_from_slice(&acc);
        }
    }
    Image::new(lay.width, lay.height, 3, pixels)
}

/// Adjoint of [`render_color`]: gradients for the density grid and the
/// three color grids.
pub fn render_color_backward(
    density: &ScalarGrid,
    color: [&ScalarGrid; 3],
    view: ViewConfig,
    config: &RenderConfig,
    grad_image: &Image,
) -> Result<(ScalarGrid, [ScalarGrid; 3])> {
    config.validate()?;
    for ch in &color {
        if ch.spec != density.spec {
            return Err(Error::ShapeMismatch("color grid does not match density grid".into()));
        }
    }
    let lay = ray_layout(&density.spec, view)?;
    if grad_image.width != lay.width || grad_image.height != lay.height || grad_image.channels != 3 {
        return Err(Error::ShapeMismatch("grad image does not match color render".into()));
    }
    let dr = density.spec.spacing;
    let mut grad_d = ScalarGrid::zeros(density.spec.clone());
    let mut grad_c = [
        ScalarGrid::zeros(density.spec.clone()),
        ScalarGrid::zeros(density.spec.clone()),
        ScalarGrid::zeros(density.spec.clone()),
    ];
    let mut trans = vec![0.0; lay.steps];
    for py in 0..lay.height {
        for px in 0..lay.width {
            let base = (py * lay.width + px) * 3;
            let g = [
                grad_image.pixels[base],
                grad_image.pixels[base + 1],
                grad_image.pixels[base + 2],
            ];
            if g == [0.0; 3] {
                continue;
            }
            let mut t = 1.0;
            for s in 0..lay.steps {
                let d = density.values[lay.sample_index(px, py, s)].max(0.0);
                trans[s] = t;
                t *= (-config.gamma * d * dr).exp();
            }
            // suffix[c] = Σ_{k>s} g_c * emission * d_k * c_k * Δr * T_k
            let mut suffix = [0.0; 3];
            for s in (0..lay.steps).rev() {
                let idx = lay.sample_index(px, py, s);
                let d_raw = density.values[idx];
                let d = d_raw.max(0.0);
                let mut dd = 0.0;
                for c in 0..3 {
                    let col_raw = color[c].values[idx];
                    let col = col_raw.max(0.0);
                    // suffix already carries the pixel gradient factor.
                    dd += g[c] * config.emission * col * dr * trans[s]
                        - config.gamma * dr * suffix[c];
                    if col_raw >= 0.0 {
                        grad_c[c].values[idx] += g[c] * config.emission * d * dr * trans[s];
                    }
                    suffix[c] += g[c] * config.emission * d * col * dr * trans[s];
                }
                if d_raw >= 0.0 {
                    grad_d.values[idx] += dd;
                }
            }
        }
    }
    Ok((grad_d, grad_c))
}

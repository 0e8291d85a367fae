//! Per-particle attribute optimization against a style target.
//!
//! A frame is stylized by descending, with Adam, the multi-view objective
//!
//! ```text
//! Σ_θ Σ_λ w_λ L_style(R_θ(splat(x, λ + Δλ)))  +  regularizers
//! ```
//!
//! over the selected attribute deltas: density changes splat through the
//! normalized transfer, position displacements route through the SPH
//! density, color changes through the colored emission renderer. Sequences
//! are stylized keyframe by keyframe (warm-started from the previous
//! keyframe), linearly interpolated in between, then smoothed over time
//! with a Gaussian on each particle's delta series.

use crate::adam::{AdamParams, AdamState};
use crate::bank::FilterBank;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarGrid};
use crate::image::Image;
use crate::kernel::gaussian_weights;
use crate::particles::{ParticleSet, CH_COLOR_B, CH_COLOR_G, CH_COLOR_R, CH_MASS};
use crate::render::{
    render_color, render_color_backward, render_liquid, render_liquid_backward, render_smoke,
    render_smoke_backward, RenderConfig, RenderMode, ViewConfig,
};
use crate::resim::rest_density_grid;
use crate::style::{reg_density, reg_position, style_loss_backward, StyleTarget, REG_DENSITY_EPS};
use crate::transfer::{p2g_backward, p2g_forward, sph_density_backward, sph_density_forward};

/// Density channel stylized by the density attribute.
pub const DENSITY_CHANNEL: &str = "rho0";

/// Optimizable per-particle attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Attribute {
    Density,
    Color,
    Position,
}

/// An attribute together with its loss weight `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeSelection {
    pub attribute: Attribute,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct StylizeConfig {
    pub views: Vec<ViewConfig>,
    pub attributes: Vec<AttributeSelection>,
    pub render: RenderConfig,
    /// Splat support `h` for the particle-to-grid transfers.
    pub splat_support: f64,
    pub reg_density_weight: f64,
    pub reg_position_weight: f64,
    pub iterations: usize,
    pub adam: AdamParams,
}

impl StylizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("at least one view is required".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Config("at least one attribute must be selected".into()));
        }
        let mut seen = Vec::new();
        for sel in &self.attributes {
            if seen.contains(&sel.attribute) {
                return Err(Error::Config(format!("duplicate attribute {:?}", sel.attribute)));
            }
            seen.push(sel.attribute);
            if !(sel.weight.is_finite() && sel.weight >= 0.0) {
                return Err(Error::Config("attribute weights must be >= 0".into()));
            }
        }
        if !(self.splat_support.is_finite() && self.splat_support > 0.0) {
            return Err(Error::Config("splat support must be > 0".into()));
        }
        for (name, w) in [
            ("density regularizer weight", self.reg_density_weight),
            ("position regularizer weight", self.reg_position_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        self.render.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.adam.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn selected(&self, attribute: Attribute) -> Option<f64> {
        self.attributes.iter().find(|s| s.attribute == attribute).map(|s| s.weight)
    }
}

/// Optimized per-particle changes, one slot per selected attribute.
/// Density and each color channel hold one value per particle; position
/// holds `dim` values per particle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributeDeltas {
    pub density: Option<Vec<f64>>,
    pub color: Option<[Vec<f64>; 3]>,
    pub position: Option<Vec<f64>>,
}

impl AttributeDeltas {
    fn zeros(config: &StylizeConfig, count: usize, dim: usize) -> Self {
        AttributeDeltas {
            density: config.selected(Attribute::Density).map(|_| vec![0.0; count]),
            color: config
                .selected(Attribute::Color)
                .map(|_| [vec![0.0; count], vec![0.0; count], vec![0.0; count]]),
            position: config.selected(Attribute::Position).map(|_| vec![0.0; count * dim]),
        }
    }

    fn check_shape(&self, other: &AttributeDeltas) -> Result<()> {
        let len = |v: &Option<Vec<f64>>| v.as_ref().map(Vec::len);
        let clen = |v: &Option<[Vec<f64>; 3]>| v.as_ref().map(|c| c[0].len());
        if len(&self.density) != len(&other.density)
            || clen(&self.color) != clen(&other.color)
            || len(&self.position) != len(&other.position)
        {
            return Err(Error::ShapeMismatch("attribute delta shapes differ".into()));
        }
        Ok(())
    }

    fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        if let Some(d) = &self.density {
            flat.extend_from_slice(d);
        }
        if let Some(c) = &self.color {
            for ch in c {
                flat.extend_from_slice(ch);
            }
        }
        if let Some(p) = &self.position {
            flat.extend_from_slice(p);
        }
        flat
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        if let Some(d) = &mut self.density {
            let len = d.len();
            d.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        if let Some(c) = &mut self.color {
            for ch in c.iter_mut() {
                let len = ch.len();
                ch.copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
        }
        if let Some(p) = &mut self.position {
            let len = p.len();
            p.copy_from_slice(&flat[offset..offset + len]);
        }
    }

    /// Apply `f` componentwise across equally-shaped delta sets (used by
    /// interpolation and smoothing).
    fn map_components<F>(sets: &[&AttributeDeltas], mut f: F) -> AttributeDeltas
    where
        F: FnMut(&[f64]) -> f64,
    {
        let first = sets[0];
        let mut scratch = vec![0.0; sets.len()];
        let mut out = AttributeDeltas::default();
        if let Some(d) = &first.density {
            let mut values = Vec::with_capacity(d.len());
            for i in 0..d.len() {
                for (k, s) in sets.iter().enumerate() {
                    scratch[k] = s.density.as_ref().unwrap()[i];
                }
                values.push(f(&scratch));
            }
            out.density = Some(values);
        }
        if let Some(c) = &first.color {
            let mut chans: [Vec<f64>; 3] = Default::default();
            for (ci, chan) in chans.iter_mut().enumerate() {
                let mut values = Vec::with_capacity(c[ci].len());
                for i in 0..c[ci].len() {
                    for (k, s) in sets.iter().enumerate() {
                        scratch[k] = s.color.as_ref().unwrap()[ci][i];
                    }
                    values.push(f(&scratch));
                }
                *chan = values;
            }
            out.color = Some(chans);
        }
        if let Some(p) = &first.position {
            let mut values = Vec::with_capacity(p.len());
            for i in 0..p.len() {
                for (k, s) in sets.iter().enumerate() {
                    scratch[k] = s.position.as_ref().unwrap()[i];
                }
                values.push(f(&scratch));
            }
            out.position = Some(values);
        }
        out
    }
}

/// One row of the loss trace: raw regularizer values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTrace {
    pub iteration: usize,
    pub style: f64,
    pub reg_density: f64,
    pub reg_position: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StylizeResult {
    pub deltas: AttributeDeltas,
    pub trace: Vec<LossTrace>,
}

fn render_gray(grid: &ScalarGrid, view: ViewConfig, cfg: &RenderConfig) -> Result<Image> {
    match cfg.mode {
        RenderMode::Smoke => render_smoke(grid, view, cfg),
        RenderMode::Liquid => render_liquid(grid, view, cfg),
    }
}

fn render_gray_backward(
    grid: &ScalarGrid,
    view: ViewConfig,
    cfg: &RenderConfig,
    grad_image: &Image,
) -> Result<ScalarGrid> {
    match cfg.mode {
        RenderMode::Smoke => render_smoke_backward(grid, view, cfg, grad_image),
        RenderMode::Liquid => render_liquid_backward(grid, view, cfg, grad_image),
    }
}

struct FrameProblem<'a> {
    particles: &'a ParticleSet,
    spec: &'a GridSpec,
    bank: &'a FilterBank,
    target: &'a StyleTarget,
    config: &'a StylizeConfig,
    /// Rest-density target for the position regularizer, present when the
    /// position attribute is active with a positive weight.
    rho0: Option<ScalarGrid>,
}

impl<'a> FrameProblem<'a> {
    fn new(
        particles: &'a ParticleSet,
        spec: &'a GridSpec,
        bank: &'a FilterBank,
        target: &'a StyleTarget,
        config: &'a StylizeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if spec.dim() != particles.dim() {
            return Err(Error::invalid("particle dim does not match grid dim"));
        }
        if config.selected(Attribute::Density).is_some() {
            particles.channel(DENSITY_CHANNEL)?;
        }
        if config.selected(Attribute::Color).is_some() {
            for ch in [CH_COLOR_R, CH_COLOR_G, CH_COLOR_B] {
                particles.channel(ch)?;
            }
        }
        let rho0 = if config.selected(Attribute::Position).is_some() {
            particles.channel(CH_MASS)?;
            if config.reg_position_weight > 0.0 {
                Some(rest_density_grid(
                    particles.positions(),
                    particles.dim(),
                    particles.channel(CH_MASS)?,
                    config.splat_support,
                    spec,
                )?)
            } else {
                None
            }
        } else {
            None
        };
        Ok(FrameProblem { particles, spec, bank, target, config, rho0 })
    }

    /// Loss and gradient at the given deltas.
    fn evaluate(&self, deltas: &AttributeDeltas, iteration: usize) -> Result<(LossTrace, AttributeDeltas)> {
        let cfg = self.config;
        let dim = self.particles.dim();
        let n = self.particles.len();
        let h = cfg.splat_support;
        let mut grads = AttributeDeltas::zeros(cfg, n, dim);

        let positions: Vec<f64> = match &deltas.position {
            Some(dp) => {
                self.particles.positions().iter().zip(dp).map(|(x, d)| x + d).collect()
            }
            None => self.particles.positions().to_vec(),
        };

        let mut style_total = 0.0;

        // Density attribute: normalized splat of rho0 + delta.
        if let Some(w) = cfg.selected(Attribute::Density) {
            let base = self.particles.channel(DENSITY_CHANNEL)?;
            let delta = deltas.density.as_ref().expect("density delta allocated");
            let values: Vec<f64> = base.iter().zip(delta).map(|(b, d)| b + d).collect();
            let (grid, cache) = p2g_forward(&positions, dim, &values, h, self.spec)?;
            for &view in &cfg.views {
                let image = render_gray(&grid, view, &cfg.render)?;
                let (loss, mut grad_pixels) = style_loss_backward(&image, self.bank, self.target)?;
                style_total += w * loss;
                for g in &mut grad_pixels {
                    *g *= w;
                }
                let grad_image =
                    Image { width: image.width, height: image.height, channels: 1, pixels: grad_pixels };
                let grad_grid = render_gray_backward(&grid, view, &cfg.render, &grad_image)?;
                let (gv, gp) = p2g_backward(&cache, &grad_grid)?;
                accumulate(grads.density.as_mut().unwrap(), &gv);
                if let Some(gpos) = grads.position.as_mut() {
                    accumulate(gpos, &gp);
                }
            }
        }

        // Color attribute: colored emission over the (fixed-shape) density.
        if let Some(w) = cfg.selected(Attribute::Color) {
            let base_density = self.particles.channel(DENSITY_CHANNEL)?;
            let density_values: Vec<f64> = match &deltas.density {
                Some(dd) => base_density.iter().zip(dd).map(|(b, d)| b + d).collect(),
                None => base_density.to_vec(),
            };
            let (density_grid, density_cache) =
                p2g_forward(&positions, dim, &density_values, h, self.spec)?;
            let color_delta = deltas.color.as_ref().expect("color delta allocated");
            let mut color_grids = Vec::new();
            let mut color_caches = Vec::new();
            for (ci, name) in [CH_COLOR_R, CH_COLOR_G, CH_COLOR_B].iter().enumerate() {
                let base = self.particles.channel(name)?;
                let values: Vec<f64> =
                    base.iter().zip(&color_delta[ci]).map(|(b, d)| b + d).collect();
                let (grid, cache) = p2g_forward(&positions, dim, &values, h, self.spec)?;
                color_grids.push(grid);
                color_caches.push(cache);
            }
            for &view in &cfg.views {
                let image = render_color(
                    &density_grid,
                    [&color_grids[0], &color_grids[1], &color_grids[2]],
                    view,
                    &cfg.render,
                )?;
                let (loss, mut grad_pixels) = style_loss_backward(&image, self.bank, self.target)?;
                style_total += w * loss;
                for g in &mut grad_pixels {
                    *g *= w;
                }
                let grad_image =
                    Image { width: image.width, height: image.height, channels: 3, pixels: grad_pixels };
                let (grad_density, grad_colors) = render_color_backward(
                    &density_grid,
                    [&color_grids[0], &color_grids[1], &color_grids[2]],
                    view,
                    &cfg.render,
                    &grad_image,
                )?;
                for (ci, grad_color) in grad_colors.iter().enumerate() {
                    let (gv, gp) = p2g_backward(&color_caches[ci], grad_color)?;
                    accumulate(&mut grads.color.as_mut().unwrap()[ci], &gv);
                    if let Some(gpos) = grads.position.as_mut() {
                        accumulate(gpos, &gp);
                    }
                }
                let (gv, gp) = p2g_backward(&density_cache, &grad_density)?;
                if let Some(gd) = grads.density.as_mut() {
                    accumulate(gd, &gv);
                }
                if let Some(gpos) = grads.position.as_mut() {
                    accumulate(gpos, &gp);
                }
            }
        }

        // Position attribute: SPH density renderings.
        if let Some(w) = cfg.selected(Attribute::Position) {
            let masses = self.particles.channel(CH_MASS)?;
            let (grid, cache) = sph_density_forward(&positions, dim, masses, h, self.spec)?;
            for &view in &cfg.views {
                let image = render_gray(&grid, view, &cfg.render)?;
                let (loss, mut grad_pixels) = style_loss_backward(&image, self.bank, self.target)?;
                style_total += w * loss;
                for g in &mut grad_pixels {
                    *g *= w;
                }
                let grad_image =
                    Image { width: image.width, height: image.height, channels: 1, pixels: grad_pixels };
                let grad_grid = render_gray_backward(&grid, view, &cfg.render, &grad_image)?;
                let gp = sph_density_backward(&cache, &grad_grid)?;
                accumulate(grads.position.as_mut().unwrap(), &gp);
            }
        }

        // Regularizers.
        let mut reg_density_value = 0.0;
        if let Some(delta) = &deltas.density {
            let (value, grad) = reg_density(delta, REG_DENSITY_EPS);
            reg_density_value = value;
            if cfg.reg_density_weight > 0.0 {
                let gd = grads.density.as_mut().unwrap();
                for (a, b) in gd.iter_mut().zip(&grad) {
                    *a += cfg.reg_density_weight * b;
                }
            }
        }
        let mut reg_position_value = 0.0;
        if let Some(rho0) = &self.rho0 {
            let masses = self.particles.channel(CH_MASS)?;
            let (value, grad) = reg_position(&positions, dim, masses, h, rho0)?;
            reg_position_value = value;
            let gp = grads.position.as_mut().unwrap();
            for (a, b) in gp.iter_mut().zip(&grad) {
                *a += cfg.reg_position_weight * b;
            }
        }

        let total = style_total
            + cfg.reg_density_weight * reg_density_value
            + cfg.reg_position_weight * reg_position_value;
        if !total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let row = LossTrace {
            iteration,
            style: style_total,
            reg_density: reg_density_value,
            reg_position: reg_position_value,
            total,
        };
        Ok((row, grads))
    }
}

fn accumulate(into: &mut [f64], from: &[f64]) {
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

/// Optimize the selected attribute deltas for one frame. Base particle
/// data is never modified; `warm_start` seeds the deltas (shape-checked)
/// and the trace has `iterations + 1` rows, the first at the start point.
pub fn stylize_frame(
    particles: &ParticleSet,
    grid_spec: &GridSpec,
    bank: &FilterBank,
    target: &StyleTarget,
    config: &StylizeConfig,
    warm_start: Option<&AttributeDeltas>,
) -> Result<StylizeResult> {
    let problem = FrameProblem::new(particles, grid_spec, bank, target, config)?;
    let mut deltas = AttributeDeltas::zeros(config, particles.len(), particles.dim());
    if let Some(warm) = warm_start {
        deltas.check_shape(warm)?;
        deltas = warm.clone();
    }
    let mut flat = deltas.flatten();
    let mut adam = AdamState::new(config.adam, flat.len())?;
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for iteration in 0..config.iterations {
        let (row, grads) = problem.evaluate(&deltas, iteration)?;
        trace.push(row);
        adam.step(&mut flat, &grads.flatten())?;
        deltas.unflatten(&flat);
    }
    let (row, _) = problem.evaluate(&deltas, config.iterations)?;
    trace.push(row);
    Ok(StylizeResult { deltas, trace })
}

// ---------------------------------------------------------------------------
// Temporal processing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalConfig {
    /// Gaussian width in frames.
    pub sigma: f64,
    /// Filter radius in frames (2*radius + 1 taps).
    pub radius: usize,
    /// Stylize every k-th frame, interpolate in between.
    pub keyframe_stride: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig { sigma: 1.5, radius: 3, keyframe_stride: 1 }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config("temporal sigma must be > 0".into()));
        }
        if self.keyframe_stride == 0 {
            return Err(Error::Config("keyframe stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Convolve each particle's delta series with the Gaussian taps; boundary
/// frames renormalize over the in-range taps. A convex combination, so
/// `max_t |out_t| <= max_t |in_t|` per component.
pub fn smooth_temporal(frames: &[AttributeDeltas], config: &TemporalConfig) -> Result<Vec<AttributeDeltas>> {
    config.validate()?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    for f in frames.iter().skip(1) {
        frames[0].check_shape(f)?;
    }
    let weights = gaussian_weights(config.sigma, config.radius)?;
    let radius = config.radius as isize;
    let t_count = frames.len() as isize;
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..t_count {
        let lo = (t - radius).max(0);
        let hi = (t + radius).min(t_count - 1);
        let window: Vec<&AttributeDeltas> =
            (lo..=hi).map(|s| &frames[s as usize]).collect();
        let taps: Vec<f64> =
            (lo..=hi).map(|s| weights[(s - t + radius) as usize]).collect();
        let norm: f64 = taps.iter().sum();
        out.push(AttributeDeltas::map_components(&window, |vals| {
            vals.iter().zip(&taps).map(|(v, w)| v * w).sum::<f64>() / norm
        }));
    }
    Ok(out)
}

/// Expand keyframe deltas (at frames 0, k, 2k, ...) to all `frame_count`
/// frames by per-particle linear interpolation; frames past the last
/// keyframe hold its value.
pub fn interpolate_keyframes(
    keyframes: &[AttributeDeltas],
    stride: usize,
    frame_count: usize,
) -> Result<Vec<AttributeDeltas>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if frame_count == 0 {
        return Ok(Vec::new());
    }
    let expected = (frame_count - 1) / stride + 1;
    if keyframes.len() != expected {
        return Err(Error::invalid(format!(
            "{} keyframes provided, {frame_count} frames at stride {stride} need {expected}",
            keyframes.len()
        )));
    }
    let mut out = Vec::with_capacity(frame_count);
    for t in 0..frame_count {
        let a = t / stride;
        let within = t % stride;
        if within == 0 || a + 1 >= keyframes.len() {
            out.push(keyframes[a.min(keyframes.len() - 1)].clone());
        } else {
            let alpha = within as f64 / stride as f64;
            let pair = [&keyframes[a], &keyframes[a + 1]];
            out.push(AttributeDeltas::map_components(&pair, |v| {
                (1.0 - alpha) * v[0] + alpha * v[1]
            }));
        }
    }
    Ok(out)
}

/// Per-keyframe optimization record inside a sequence run.
#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub frame: usize,
    pub trace: Vec<LossTrace>,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    /// Smoothed deltas for every input frame.
    pub frames: Vec<AttributeDeltas>,
    pub keyframes: Vec<KeyframeRecord>,
}

/// Stylize a frame sequence: optimize every `keyframe_stride`-th frame
/// (warm-started from the previous keyframe's deltas), interpolate the
/// skipped frames, then smooth each particle's series over time. Particle
/// identity must be consistent across frames (same count and ordering).
pub fn stylize_sequence(
    frames: &[ParticleSet],
    grid_spec: &GridSpec,
    bank: &FilterBank,
    target: &StyleTarget,
    config: &StylizeConfig,
    temporal: &TemporalConfig,
) -> Result<SequenceResult> {
    temporal.validate()?;
    if frames.is_empty() {
        return Ok(SequenceResult { frames: Vec::new(), keyframes: Vec::new() });
    }
    let count = frames[0].len();
    if frames.iter().any(|f| f.len() != count) {
        return Err(Error::invalid("particle count must be constant across frames"));
    }
    let stride = temporal.keyframe_stride;
    let mut key_deltas = Vec::new();
    let mut keyframes = Vec::new();
    let mut warm: Option<AttributeDeltas> = None;
    for t in (0..frames.len()).step_by(stride) {
        let result = stylize_frame(&frames[t], grid_spec, bank, target, config, warm.as_ref())?;
        warm = Some(result.deltas.clone());
        keyframes.push(KeyframeRecord { frame: t, trace: result.trace });
        key_deltas.push(result.deltas);
    }
    let interpolated = interpolate_keyframes(&key_deltas, stride, frames.len())?;
    let smoothed = smooth_temporal(&interpolated, temporal)?;
    Ok(SequenceResult { frames: smoothed, keyframes })
}

// ---------------------------------------------------------------------------
// Multi-fluid stylization
// ---------------------------------------------------------------------------

/// One fluid in a multi-fluid scene: its own particles, loss network,
/// target and settings.
pub struct FluidGroup<'a> {
    pub particles: &'a ParticleSet,
    pub bank: &'a FilterBank,
    pub target: &'a StyleTarget,
    pub config: &'a StylizeConfig,
}

/// Stylize several particle sets sharing one grid domain. Each group is
/// optimized against its own render; composite outputs add the splatted
/// densities (exact for supports separated by more than twice the splat
/// support, since the kernel reaches `2h`).
pub fn stylize_multi(groups: &[FluidGroup<'_>], grid_spec: &GridSpec) -> Result<Vec<StylizeResult>> {
    groups
        .iter()
        .map(|g| stylize_frame(g.particles, grid_spec, g.bank, g.target, g.config, None))
        .collect()
}

/// Additive density compositing for multi-fluid outputs.
pub fn composite_density(grids: &[ScalarGrid]) -> Result<ScalarGrid> {
    let first = grids.first().ok_or_else(|| Error::invalid("no grids to composite"))?;
    let mut out = ScalarGrid::zeros(first.spec.clone());
    for g in grids {
        if g.spec != first.spec {
            return Err(Error::ShapeMismatch("composited grids must share a spec".into()));
        }
        for (a, b) in out.values.iter_mut().zip(&g.values) {
            *a += b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Axis;
    use crate::transfer::p2g;

    fn tiny_particles(n_side: usize) -> ParticleSet {
        // n_side x n_side block centered on a 16x16 grid, unit density.
        let mut positions = Vec::new();
        let offset = (16.0 - n_side as f64) / 2.0;
        for j in 0..n_side {
            for i in 0..n_side {
                positions.extend_from_slice(&[offset + i as f64, offset + j as f64]);
            }
        }
        let n = n_side * n_side;
        let mut set = ParticleSet::new(2, positions).unwrap();
        set.set_channel(DENSITY_CHANNEL, vec![1.0; n]).unwrap();
        set.set_channel(CH_MASS, vec![1.0; n]).unwrap();
        set
    }

    fn tiny_spec() -> GridSpec {
        GridSpec::new([16, 16, 1], 1.0, [0.0; 3]).unwrap()
    }

    fn density_config(iterations: usize) -> StylizeConfig {
        StylizeConfig {
            views: vec![ViewConfig { axis: Axis::ZPos }],
            attributes: vec![AttributeSelection { attribute: Attribute::Density, weight: 1.0 }],
            render: RenderConfig { mode: RenderMode::Smoke, gamma: 1.0, emission: 1.0 },
            splat_support: 1.5,
            reg_density_weight: 0.0,
            reg_position_weight: 0.0,
            iterations,
            adam: AdamParams::default(),
        }
    }

    fn initial_render_target(particles: &ParticleSet, config: &StylizeConfig, bank: &FilterBank) -> StyleTarget {
        let grid = p2g(
            particles.positions(),
            2,
            particles.channel(DENSITY_CHANNEL).unwrap(),
            config.splat_support,
            &tiny_spec(),
        )
        .unwrap();
        let image = render_smoke(&grid, config.views[0], &config.render).unwrap();
        StyleTarget::from_image(&image, bank, "initial render").unwrap()
    }

    #[test]
    fn zero_iterations_returns_zero_deltas() {
        let particles = tiny_particles(5);
        let bank = FilterBank::default_bank(0xF10);
        let config = density_config(0);
        let target = initial_render_target(&particles, &config, &bank);
        let result =
            stylize_frame(&particles, &tiny_spec(), &bank, &target, &config, None).unwrap();
        assert_eq!(result.trace.len(), 1);
        assert!(result.deltas.density.unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn already_optimal_target_stays_at_zero() {
        let particles = tiny_particles(5);
        let bank = FilterBank::default_bank(0xF10);
        let config = density_config(10);
        let target = initial_render_target(&particles, &config, &bank);
        let result =
            stylize_frame(&particles, &tiny_spec(), &bank, &target, &config, None).unwrap();
        assert!(result.trace[0].style < 1e-10, "initial loss {}", result.trace[0].style);
        for d in result.deltas.density.unwrap() {
            assert!(d.abs() < 1e-8, "delta moved to {d}");
        }
    }

    #[test]
    fn stylization_reduces_loss_on_tiny_instance() {
        let particles = tiny_particles(5);
        let bank = FilterBank::default_bank(0xF10);
        let config = density_config(40);
        let style_img = crate::fixtures::stripe_image(16, 16);
        let target = StyleTarget::from_image(&style_img, &bank, "stripes").unwrap();
        let result =
            stylize_frame(&particles, &tiny_spec(), &bank, &target, &config, None).unwrap();
        let first = result.trace.first().unwrap().style;
        let last = result.trace.last().unwrap().style;
        assert!(last < first, "style loss should decrease: {first} -> {last}");
    }

    #[test]
    fn runs_are_bitwise_deterministic_and_inputs_untouched() {
        let particles = tiny_particles(4);
        let before = particles.clone();
        let bank = FilterBank::default_bank(3);
        let config = density_config(6);
        let style_img = crate::fixtures::stripe_image(16, 16);
        let target = StyleTarget::from_image(&style_img, &bank, "stripes").unwrap();
        let a = stylize_frame(&particles, &tiny_spec(), &bank, &target, &config, None).unwrap();
        let b = stylize_frame(&particles, &tiny_spec(), &bank, &target, &config, None).unwrap();
        assert_eq!(a.deltas, b.deltas);
        assert_eq!(particles, before);
    }

    #[test]
    fn missing_channel_is_reported() {
        let mut set = ParticleSet::new(2, vec![8.0, 8.0]).unwrap();
        set.set_channel(CH_MASS, vec![1.0]).unwrap();
        let bank = FilterBank::default_bank(3);
        let config = density_config(1);
        let style_img = crate::fixtures::stripe_image(16, 16);
        let target = StyleTarget::from_image(&style_img, &bank, "stripes").unwrap();
        match stylize_frame(&set, &tiny_spec(), &bank, &target, &config, None) {
            Err(Error::MissingChannel(name)) => assert_eq!(name, DENSITY_CHANNEL),
            other => panic!("expected MissingChannel, got {other:?}"),
        }
    }

    #[test]
    fn smoothing_identity_cases() {
        let config = TemporalConfig { sigma: 1.0, radius: 2, keyframe_stride: 1 };
        let mk = |v: f64| AttributeDeltas { density: Some(vec![v, -v]), ..Default::default() };

        let single = smooth_temporal(&[mk(0.7)], &config).unwrap();
        assert_eq!(single[0], mk(0.7));

        let constant: Vec<AttributeDeltas> = (0..5).map(|_| mk(0.3)).collect();
        for frame in smooth_temporal(&constant, &config).unwrap() {
            let d = frame.density.unwrap();
            assert!((d[0] - 0.3).abs() < 1e-12 && (d[1] + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_impulse_reproduces_taps() {
        let config = TemporalConfig { sigma: 1.0, radius: 2, keyframe_stride: 1 };
        let weights = gaussian_weights(1.0, 2).unwrap();
        let frames: Vec<AttributeDeltas> = (0..9)
            .map(|t| AttributeDeltas {
                density: Some(vec![if t == 4 { 1.0 } else { 0.0 }]),
                ..Default::default()
            })
            .collect();
        let smoothed = smooth_temporal(&frames, &config).unwrap();
        for (t, frame) in smoothed.iter().enumerate() {
            let want = if (2..=6).contains(&t) { weights[t - 2] } else { 0.0 };
            let got = frame.density.as_ref().unwrap()[0];
            assert!((got - want).abs() < 1e-12, "frame {t}: {got} vs {want}");
        }
    }

    #[test]
    fn smoothing_is_sup_norm_contraction() {
        let config = TemporalConfig { sigma: 2.0, radius: 3, keyframe_stride: 1 };
        let series = [0.9, -0.4, 0.2, 0.8, -1.3, 0.0, 0.5];
        let frames: Vec<AttributeDeltas> = series
            .iter()
            .map(|&v| AttributeDeltas { density: Some(vec![v]), ..Default::default() })
            .collect();
        let smoothed = smooth_temporal(&frames, &config).unwrap();
        let max_in = series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for frame in smoothed {
            assert!(frame.density.unwrap()[0].abs() <= max_in + 1e-15);
        }
    }

    #[test]
    fn keyframe_interpolation_rules() {
        let mk = |v: f64| AttributeDeltas { density: Some(vec![v]), ..Default::default() };
        // Stride 1: identity.
        let out = interpolate_keyframes(&[mk(1.0), mk(2.0)], 1, 2).unwrap();
        assert_eq!(out[0], mk(1.0));
        assert_eq!(out[1], mk(2.0));
        // Midpoint.
        let out = interpolate_keyframes(&[mk(1.0), mk(3.0)], 2, 3).unwrap();
        assert_eq!(out[1], mk(2.0));
        // Hold past the last keyframe: 25 frames at stride 10.
        let out = interpolate_keyframes(&[mk(0.0), mk(1.0), mk(5.0)], 10, 25).unwrap();
        for t in 20..25 {
            assert_eq!(out[t], mk(5.0), "frame {t} should hold keyframe 20");
        }
        assert_eq!(out[15], mk(3.0));
        // Keyframe count validation.
        assert!(interpolate_keyframes(&[mk(0.0)], 10, 25).is_err());
    }

    #[test]
    fn sequence_on_single_frame_equals_frame_stylization() {
        let particles = tiny_particles(4);
        let bank = FilterBank::default_bank(5);
        let config = density_config(5);
        let style_img = crate::fixtures::stripe_image(16, 16);
        let target = StyleTarget::from_image(&style_img, &bank, "stripes").unwrap();
        let temporal = TemporalConfig::default();
        let seq = stylize_sequence(
            &[particles.clone()],
            &tiny_spec(),
            &bank,
            &target,
            &config,
            &temporal,
        )
        .unwrap();
        let single =
            stylize_frame(&particles, &tiny_spec(), &bank, &target, &config, None).unwrap();
        assert_eq!(seq.frames.len(), 1);
        assert_eq!(seq.frames[0], single.deltas);
    }

    #[test]
    fn static_sequence_with_optimal_target_is_time_invariant() {
        let particles = tiny_particles(4);
        let bank = FilterBank::default_bank(5);
        let config = density_config(8);
        let target = initial_render_target(&particles, &config, &bank);
        let frames = vec![particles.clone(), particles.clone(), particles.clone(), particles];
        let temporal = TemporalConfig { sigma: 1.5, radius: 3, keyframe_stride: 1 };
        let seq =
            stylize_sequence(&frames, &tiny_spec(), &bank, &target, &config, &temporal).unwrap();
        let first = seq.frames[0].density.as_ref().unwrap().clone();
        for frame in &seq.frames[1..] {
            for (a, b) in frame.density.as_ref().unwrap().iter().zip(&first) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn stride_two_static_sequence_interpolates_exactly() {
        let particles = tiny_particles(4);
        let bank = FilterBank::default_bank(5);
        let config = density_config(4);
        let style_img = crate::fixtures::stripe_image(16, 16);
        let target = StyleTarget::from_image(&style_img, &bank, "stripes").unwrap();
        let frames = vec![particles.clone(), particles.clone(), particles.clone(), particles];
        // No smoothing influence: radius 0 would be invalid sigma-wise, so
        // compare against the unsmoothed interpolation directly.
        let temporal = TemporalConfig { sigma: 1.5, radius: 0, keyframe_stride: 2 };
        let seq =
            stylize_sequence(&frames, &tiny_spec(), &bank, &target, &config, &temporal).unwrap();
        let d0 = seq.frames[0].density.as_ref().unwrap();
        let d1 = seq.frames[1].density.as_ref().unwrap();
        let d2 = seq.frames[2].density.as_ref().unwrap();
        for i in 0..d0.len() {
            let mid = 0.5 * (d0[i] + d2[i]);
            assert!((d1[i] - mid).abs() < 1e-15);
        }
        assert_eq!(seq.frames[3], seq.frames[2]);
        assert_eq!(seq.keyframes.len(), 2);
    }

    #[test]
    fn composite_adds_densities() {
        let spec = tiny_spec();
        let a = ScalarGrid::constant(spec.clone(), 1.0).unwrap();
        let b = ScalarGrid::constant(spec.clone(), 0.5).unwrap();
        let c = composite_density(&[a, b]).unwrap();
        assert!(c.values.iter().all(|&v| v == 1.5));
    }
}

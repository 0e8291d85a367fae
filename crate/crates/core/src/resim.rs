//! Re-simulation of grid inputs as sparse particle sets.
//!
//! Pipeline for one frame of a grid-based simulation:
//!
//! 1. sample one particle per occupied cell ([`sample_particles`]),
//! 2. transport the particles through the velocity field with an RK2
//!    midpoint step ([`advect_particles`]),
//! 3. relax irregular particle distributions by descending the
//!    rest-density objective ([`redistribute_positions`]),
//! 4. store the density on the particles as a residual pyramid over
//!    halving kernel radii ([`multiscale_density`]), reconstructed by
//!    [`reconstruct_density`].
//!
//! The pyramid works like a Laplacian pyramid: level 0 interpolates the
//! grid density directly and splats it back at the coarsest radius; each
//! following level samples the residual against the running reconstruction
//! and splats it at half the previous radius, so low frequencies come from
//! wide kernels and details from narrow ones.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarGrid, VectorGrid};
use crate::particles::{rho_channel, ParticleSet, CH_MASS};
use crate::style::reg_position;
use crate::transfer::{g2p, p2g};

/// Pyramid geometry: coarsest splat radius and subdivision count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiScaleParams {
    pub coarse_radius: f64,
    pub subdivisions: usize,
}

impl Default for MultiScaleParams {
    fn default() -> Self {
        // Coarsest radius of two cells, three subdivisions.
        MultiScaleParams { coarse_radius: 2.0, subdivisions: 3 }
    }
}

impl MultiScaleParams {
    pub fn validate(&self, spacing: f64) -> Result<()> {
        if !(self.coarse_radius.is_finite() && self.coarse_radius >= spacing) {
            return Err(Error::invalid(format!(
                "coarse radius {} must be >= grid spacing {spacing}",
                self.coarse_radius
            )));
        }
        Ok(())
    }

    /// True when the finest radius still resolves the grid
    /// (`r / 2^n >= spacing / 2`); callers may warn otherwise.
    pub fn well_scaled(&self, spacing: f64) -> bool {
        self.coarse_radius / (1u64 << self.subdivisions) as f64 >= 0.5 * spacing
    }

    /// Radii `r, r/2, ..., r/2^n` paired with density levels `0..=n`.
    pub fn radii(&self) -> Vec<f64> {
        (0..=self.subdivisions)
            .map(|i| self.coarse_radius / (1u64 << i) as f64)
            .collect()
    }
}

/// One particle at the center of every cell whose density exceeds
/// `threshold`; unit mass, grid layout order (stable identity across
/// frames of a static topology).
pub fn sample_particles(grid: &ScalarGrid, threshold: f64) -> Result<ParticleSet> {
    let dim = grid.spec.dim();
    let mut positions = Vec::new();
    for idx in 0..grid.spec.len() {
        if grid.values[idx] > threshold {
            let (i, j, k) = grid.spec.coords(idx);
            let pos = grid.spec.node_position(i, j, k);
            positions.extend_from_slice(&pos[..dim]);
        }
    }
    let count = positions.len() / dim;
    let mut set = ParticleSet::new(dim, positions)?;
    set.set_channel(CH_MASS, vec![1.0; count])?;
    Ok(set)
}

/// RK2 midpoint transport through `velocity`, positions clamped to the
/// node bounding box of the grid.
pub fn advect_particles(particles: &ParticleSet, velocity: &VectorGrid, dt: f64) -> Result<Vec<f64>> {
    if !dt.is_finite() {
        return Err(Error::invalid("dt must be finite"));
    }
    let dim = particles.dim();
    if dim != velocity.spec.dim() {
        return Err(Error::invalid("particle dim does not match velocity grid dim"));
    }
    let spec = &velocity.spec;
    let components: Vec<ScalarGrid> = (0..velocity.components)
        .map(|c| ScalarGrid { spec: spec.clone(), values: velocity.component(c) })
        .collect();

    let sample_velocity = |positions: &[f64]| -> Result<Vec<Vec<f64>>> {
        components.iter().map(|g| g2p(g, positions, dim)).collect()
    };

    let clamp = |positions: &mut [f64]| {
        for p in 0..positions.len() / dim {
            for a in 0..dim {
                let lo = spec.origin[a];
                let hi = spec.origin[a] + spec.spacing * (spec.dims[a] - 1) as f64;
                positions[p * dim + a] = positions[p * dim + a].clamp(lo, hi);
            }
        }
    };

    let n = particles.len();
    let x0 = particles.positions();
    let v0 = sample_velocity(x0)?;
    let mut mid = x0.to_vec();
    for p in 0..n {
        for a in 0..dim {
            mid[p * dim + a] += 0.5 * dt * v0[a][p];
        }
    }
    clamp(&mut mid);
    let v_mid = sample_velocity(&mid)?;
    let mut out = x0.to_vec();
    for p in 0..n {
        for a in 0..dim {
            out[p * dim + a] += dt * v_mid[a][p];
        }
    }
    clamp(&mut out);
    Ok(out)
}

/// Rest-density target for the distribution objective: the mean SPH
/// density over occupied cells on cells that contain at least one
/// particle, zero elsewhere.
pub fn rest_density_grid(
    positions: &[f64],
    dim: usize,
    masses: &[f64],
    h: f64,
    spec: &GridSpec,
) -> Result<ScalarGrid> {
    let density = crate::transfer::sph_density(positions, dim, masses, h, spec)?;
    let mut occupied = vec![false; spec.len()];
    for p in 0..positions.len() / dim {
        let mut cell = [0usize; 3];
        for a in 0..dim {
            let u = (positions[p * dim + a] - spec.origin[a]) / spec.spacing;
            cell[a] = u.round().clamp(0.0, (spec.dims[a] - 1) as f64) as usize;
        }
        occupied[spec.index(cell[0], cell[1], cell[2])] = true;
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (idx, &occ) in occupied.iter().enumerate() {
        if occ {
            sum += density.values[idx];
            count += 1;
        }
    }
    let rest = if count > 0 { sum / count as f64 } else { 0.0 };
    let values = occupied.iter().map(|&occ| if occ { rest } else { 0.0 }).collect();
    ScalarGrid::new(spec.clone(), values)
}

/// Gradient descent on the [`reg_position`] objective with step rejection:
/// a step that increases the objective is rolled back and the step size is
/// halved, up to ten halvings for the whole run. Returns the new positions
/// and the objective trace over accepted steps (non-increasing).
pub fn redistribute_positions(
    particles: &ParticleSet,
    rho0: &ScalarGrid,
    h: f64,
    steps: usize,
    step_size: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::invalid("step size must be > 0"));
    }
    let dim = particles.dim();
    let masses = particles.channel(CH_MASS)?;
    let mut positions = particles.positions().to_vec();
    let (mut objective, mut grad) = reg_position(&positions, dim, masses, h, rho0)?;
    let mut trace = vec![objective];
    let mut step = step_size;
    let mut halvings = 0;
    'outer: for _ in 0..steps {
        loop {
            let candidate: Vec<f64> =
                positions.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            let (cand_obj, cand_grad) = reg_position(&candidate, dim, masses, h, rho0)?;
            if cand_obj <= objective {
                positions = candidate;
                objective = cand_obj;
                grad = cand_grad;
                trace.push(objective);
                break;
            }
            if halvings >= 10 {
                break 'outer;
            }
            halvings += 1;
            step *= 0.5;
        }
    }
    Ok((positions, trace))
}

/// Result of [`multiscale_density`]: the input particles augmented with the
/// per-level density channels, the radius schedule, and the reconstruction
/// accumulated along the way.
#[derive(Debug, Clone)]
pub struct MultiScaleResult {
    pub particles: ParticleSet,
    pub radii: Vec<f64>,
    pub reconstruction: ScalarGrid,
}

/// Build the residual density pyramid on the particles.
///
/// Level 0 samples the grid density directly; every further level samples
/// the residual of the running reconstruction and splats it back at half
/// the previous radius. The returned reconstruction equals
/// `Σ_i p2g(x, rho_i, r_i)` exactly.
pub fn multiscale_density(
    particles: &ParticleSet,
    rho_g: &ScalarGrid,
    params: &MultiScaleParams,
) -> Result<MultiScaleResult> {
    params.validate(rho_g.spec.spacing)?;
    let dim = particles.dim();
    let positions = particles.positions();
    let mut out = particles.clone();

    let level0 = g2p(rho_g, positions, dim)?;
    let mut radius = params.coarse_radius;
    let mut radii = vec![radius];
    let mut recon = p2g(positions, dim, &level0, radius, &rho_g.spec)?;
    out.set_channel(rho_channel(0), level0)?;

    for level in 1..=params.subdivisions {
        let residual = ScalarGrid {
            spec: rho_g.spec.clone(),
            values: rho_g.values.iter().zip(&recon.values).map(|(a, b)| a - b).collect(),
        };
        let sampled = g2p(&residual, positions, dim)?;
        radius *= 0.5;
        radii.push(radius);
        let splat = p2g(positions, dim, &sampled, radius, &rho_g.spec)?;
        for (r, s) in recon.values.iter_mut().zip(&splat.values) {
            *r += s;
        }
        out.set_channel(rho_channel(level), sampled)?;
    }
    Ok(MultiScaleResult { particles: out, radii, reconstruction: recon })
}

/// Rebuild a density grid from the per-level particle channels:
/// `Σ_i p2g(x, rho_i, r_i)` with the level-i radius.
pub fn reconstruct_density(
    particles: &ParticleSet,
    radii: &[f64],
    spec: &GridSpec,
) -> Result<ScalarGrid> {
    if radii.is_empty() {
        return Err(Error::invalid("reconstruction needs at least one radius"));
    }
    let dim = particles.dim();
    let positions = particles.positions();
    let mut recon = ScalarGrid::zeros(spec.clone());
    for (level, &radius) in radii.iter().enumerate() {
        let values = particles.channel(&rho_channel(level))?;
        let splat = p2g(positions, dim, values, radius, spec)?;
        for (r, s) in recon.values.iter_mut().zip(&splat.values) {
            *r += s;
        }
    }
    Ok(recon)
}

/// Peak signal-to-noise ratio of `recon` against `reference` in dB, with
/// the reference maximum as the peak. Infinite for an exact match.
pub fn psnr(recon: &ScalarGrid, reference: &ScalarGrid) -> Result<f64> {
    if recon.spec != reference.spec {
        return Err(Error::ShapeMismatch("psnr grids must share a spec".into()));
    }
    let n = reference.values.len() as f64;
    let mse: f64 = recon
        .values
        .iter()
        .zip(&reference.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let peak = reference.values.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::grid::GridSpec;

    #[test]
    fn sampling_empty_and_full_grids() {
        let spec = GridSpec::new([3, 2, 1], 1.0, [0.0; 3]).unwrap();
        let zero = ScalarGrid::zeros(spec.clone());
        assert_eq!(sample_particles(&zero, 0.0).unwrap().len(), 0);

        let uniform = ScalarGrid::constant(spec.clone(), 1.0).unwrap();
        let set = sample_particles(&uniform, 0.5).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.position(1), [1.0, 0.0, 0.0]);
        assert_eq!(set.channel(CH_MASS).unwrap(), vec![1.0; 6].as_slice());

        assert_eq!(sample_particles(&uniform, 2.0).unwrap().len(), 0);
    }

    #[test]
    fn advection_zero_and_constant_fields() {
        let spec = GridSpec::new([5, 5, 1], 1.0, [0.0; 3]).unwrap();
        let zero = VectorGrid::new(spec.clone(), 2, vec![0.0; 50]).unwrap();
        let grid = ScalarGrid::constant(spec.clone(), 1.0).unwrap();
        let set = sample_particles(&grid, 0.5).unwrap();
        let moved = advect_particles(&set, &zero, 0.1).unwrap();
        assert_eq!(moved, set.positions());

        let mut values = vec![0.0; 50];
        for p in 0..25 {
            values[p * 2] = 0.5;
            values[p * 2 + 1] = -0.25;
        }
        let constant = VectorGrid::new(spec, 2, values).unwrap();
        let moved = advect_particles(&set, &constant, 1.0).unwrap();
        for p in 0..set.len() {
            let x0 = set.positions()[p * 2];
            let y0 = set.positions()[p * 2 + 1];
            // Clamped at the domain boundary, exact translation inside.
            assert!((moved[p * 2] - (x0 + 0.5).min(4.0)).abs() < 1e-12);
            assert!((moved[p * 2 + 1] - (y0 - 0.25).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn advection_tracks_rigid_rotation() {
        // v = omega x (r - c) sampled on a grid; one RK2 step vs the exact
        // rotation. Interior particle, small dt.
        let n = 17;
        let spec = GridSpec::new([n, n, 1], 1.0, [0.0; 3]).unwrap();
        let c = 8.0;
        let mut values = vec![0.0; n * n * 2];
        for j in 0..n {
            for i in 0..n {
                let idx = spec.index(i, j, 0);
                values[idx * 2] = -(j as f64 - c);
                values[idx * 2 + 1] = i as f64 - c;
            }
        }
        let vel = VectorGrid::new(spec, 2, values).unwrap();
        let mut set = ParticleSet::new(2, vec![11.0, 8.0]).unwrap();
        set.set_channel(CH_MASS, vec![1.0]).unwrap();
        let dt = 0.01;
        let moved = advect_particles(&set, &vel, dt).unwrap();
        let exact = [c + 3.0 * dt.cos(), c + 3.0 * dt.sin()];
        let err = ((moved[0] - exact[0]).powi(2) + (moved[1] - exact[1]).powi(2)).sqrt();
        assert!(err < 1e-3, "rotation error {err}");
    }

    #[test]
    fn redistribution_identity_and_descent() {
        let spec = GridSpec::new([8, 8, 1], 1.0, [0.0; 3]).unwrap();
        let rho0 = ScalarGrid::constant(spec.clone(), 0.5).unwrap();
        let mut set = ParticleSet::new(2, vec![3.45, 3.5, 3.55, 3.5]).unwrap();
        set.set_channel(CH_MASS, vec![1.0, 1.0]).unwrap();

        let (pos, trace) = redistribute_positions(&set, &rho0, 1.0, 0, 0.01).unwrap();
        assert_eq!(pos, set.positions());
        assert_eq!(trace.len(), 1);

        let (pos, trace) = redistribute_positions(&set, &rho0, 1.0, 25, 0.005).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "objective increased: {w:?}");
        }
        let d0 = (set.positions()[2] - set.positions()[0]).abs();
        let d1 = (pos[2] - pos[0]).abs();
        assert!(d1 > d0, "clustered pair should separate: {d0} -> {d1}");
    }

    #[test]
    fn redistribution_fixed_point_stays_put() {
        let spec = GridSpec::new([8, 8, 1], 1.0, [0.0; 3]).unwrap();
        let mut set = ParticleSet::new(2, vec![3.0, 3.0, 5.0, 4.0]).unwrap();
        set.set_channel(CH_MASS, vec![1.0, 1.0]).unwrap();
        // Target manufactured to match the current configuration exactly.
        let rho0 =
            crate::transfer::sph_density(set.positions(), 2, &[1.0, 1.0], 1.0, &spec).unwrap();
        let (pos, trace) = redistribute_positions(&set, &rho0, 1.0, 5, 0.01).unwrap();
        assert!(trace[0].abs() < 1e-24);
        for (a, b) in pos.iter().zip(set.positions()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_support_covers_thresholded_cells() {
        let spec = GridSpec::new([6, 6, 1], 1.0, [0.0; 3]).unwrap();
        let mut grid = ScalarGrid::zeros(spec.clone());
        for (i, j) in [(1usize, 1usize), (2, 1), (4, 4)] {
            *grid.at_mut(i, j, 0) = 1.0;
        }
        let set = sample_particles(&grid, 0.5).unwrap();
        let cover =
            p2g(set.positions(), 2, &vec![1.0; set.len()], spec.spacing, &spec).unwrap();
        for idx in 0..spec.len() {
            if grid.values[idx] > 0.5 {
                assert!(cover.values[idx] > 0.0);
            }
        }
    }

    #[test]
    fn multiscale_level_zero_only() {
        let grid = fixtures::plume_volume();
        let set = sample_particles(&grid, 0.05).unwrap();
        let params = MultiScaleParams { coarse_radius: 2.0, subdivisions: 0 };
        let result = multiscale_density(&set, &grid, &params).unwrap();
        assert_eq!(result.radii, vec![2.0]);
        assert!(result.particles.has_channel("rho0"));
        assert!(!result.particles.has_channel("rho1"));
        let direct = g2p(&grid, set.positions(), 3).unwrap();
        assert_eq!(result.particles.channel("rho0").unwrap(), direct.as_slice());
    }

    #[test]
    fn multiscale_of_zero_grid_is_zero() {
        let spec = GridSpec::new([8, 8, 8], 1.0, [0.0; 3]).unwrap();
        let zero = ScalarGrid::zeros(spec.clone());
        let mut set = ParticleSet::new(3, vec![2.0, 2.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
        set.set_channel(CH_MASS, vec![1.0, 1.0]).unwrap();
        let result = multiscale_density(&set, &zero, &MultiScaleParams::default()).unwrap();
        for level in 0..=3 {
            assert!(result
                .particles
                .channel(&rho_channel(level))
                .unwrap()
                .iter()
                .all(|&v| v == 0.0));
        }
        assert!(result.reconstruction.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_matches_internal_accumulator_bitwise() {
        let grid = fixtures::plume_volume();
        let set = sample_particles(&grid, 0.05).unwrap();
        let params = MultiScaleParams { coarse_radius: 2.0, subdivisions: 2 };
        let result = multiscale_density(&set, &grid, &params).unwrap();
        let rebuilt =
            reconstruct_density(&result.particles, &result.radii, &grid.spec).unwrap();
        assert_eq!(rebuilt.values, result.reconstruction.values);
    }

    #[test]
    fn reconstruction_matches_naive_reevaluation() {
        let spec = GridSpec::new([7, 6, 1], 1.0, [0.0; 3]).unwrap();
        let mut r = crate::testutil::rng(404);
        let positions: Vec<f64> =
            (0..12).map(|_| crate::testutil::uniform(&mut r, 0.0, 5.5)).collect();
        let mut set = ParticleSet::new(2, positions.clone()).unwrap();
        let radii = [1.7, 0.85, 0.425];
        for level in 0..radii.len() {
            let values: Vec<f64> =
                (0..6).map(|_| crate::testutil::uniform(&mut r, -1.0, 1.0)).collect();
            set.set_channel(rho_channel(level), values).unwrap();
        }
        let recon = reconstruct_density(&set, &radii, &spec).unwrap();
        // Naive re-evaluation: level-by-level normalized splat as a raw
        // double loop, summed.
        for idx in 0..spec.len() {
            let (i, j, _) = spec.coords(idx);
            let node = spec.node_position(i, j, 0);
            let mut want = 0.0;
            for (level, &radius) in radii.iter().enumerate() {
                let values = set.channel(&rho_channel(level)).unwrap();
                let mut num = 0.0;
                let mut den = 0.0;
                for p in 0..6 {
                    let d = ((node[0] - positions[p * 2]).powi(2)
                        + (node[1] - positions[p * 2 + 1]).powi(2))
                    .sqrt();
                    let w = crate::kernel::kernel_cubic(d, radius).unwrap();
                    num += values[p] * w;
                    den += w;
                }
                if den >= crate::transfer::EPS_WEIGHT {
                    want += num / den;
                }
            }
            assert!((recon.values[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn multiscale_improves_reconstruction_error() {
        let grid = fixtures::plume_volume();
        let set = sample_particles(&grid, 0.05).unwrap();
        let mut errors = Vec::new();
        for subdivisions in 0..=3 {
            let params = MultiScaleParams { coarse_radius: 2.0, subdivisions };
            let result = multiscale_density(&set, &grid, &params).unwrap();
            let err: f64 = result
                .reconstruction
                .values
                .iter()
                .zip(&grid.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            errors.push(err);
        }
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "l2 error should not increase: {errors:?}");
        }
    }

    #[test]
    fn psnr_basics() {
        let spec = GridSpec::new([4, 4, 1], 1.0, [0.0; 3]).unwrap();
        let a = ScalarGrid::constant(spec.clone(), 1.0).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let mut b = a.clone();
        b.values[0] = 0.5;
        let p = psnr(&b, &a).unwrap();
        // mse = 0.25/16, peak = 1.
        assert!((p - 10.0 * (16.0 / 0.25f64).log10()).abs() < 1e-12);
    }
}

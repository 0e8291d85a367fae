//! Procedural test volumes and images.
//!
//! Deterministic data shared by the test suites, the CLI smoke tests and
//! the README walkthrough; nothing here is used by the algorithms.

use crate::grid::{GridSpec, ScalarGrid};
use crate::image::Image;

/// A 16x16x16 plume-like smoke volume: a rising column that widens and
/// bends, plus a detached puff. Values in [0, 1].
pub fn plume_volume() -> ScalarGrid {
    let spec = GridSpec::new([16, 16, 16], 1.0, [0.0; 3]).unwrap();
    let mut grid = ScalarGrid::zeros(spec.clone());
    for idx in 0..spec.len() {
        let (i, j, k) = spec.coords(idx);
        let (x, y, z) = (i as f64, j as f64, k as f64);
        // Column axis bends with height.
        let t = y / 15.0;
        let cx = 7.5 + 2.5 * (t * std::f64::consts::PI).sin();
        let cz = 7.5 + 1.5 * t;
        let radius = 1.8 + 2.2 * t;
        let d2 = (x - cx).powi(2) + (z - cz).powi(2);
        let column = (1.0 - t * 0.35) * (-d2 / (radius * radius)).exp();
        let puff = 0.7
            * (-((x - 4.0).powi(2) + (y - 12.0).powi(2) + (z - 11.0).powi(2)) / 4.5).exp();
        let v = (column + puff).min(1.0);
        grid.values[idx] = if v > 1e-3 { v } else { 0.0 };
    }
    grid
}

/// A 2D blob density on an `n x n` grid, used by the tiny stylization
/// instance. Values in [0, 1].
pub fn blob_grid_2d(n: usize) -> ScalarGrid {
    let spec = GridSpec::new([n, n, 1], 1.0, [0.0; 3]).unwrap();
    let mut grid = ScalarGrid::zeros(spec.clone());
    let c = (n as f64 - 1.0) / 2.0;
    for idx in 0..spec.len() {
        let (i, j, _) = spec.coords(idx);
        let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
        let v = (-d2 / (0.18 * (n * n) as f64)).exp();
        grid.values[idx] = if v > 0.05 { v } else { 0.0 };
    }
    grid
}

/// Diagonal sinusoidal stripes, a convenient high-contrast style reference.
pub fn stripe_image(width: usize, height: usize) -> Image {
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let phase = (x as f64 + 2.0 * y as f64) * std::f64::consts::PI / 4.0;
            pixels.push(0.5 + 0.5 * phase.sin());
        }
    }
    Image::new(width, height, 1, pixels).unwrap()
}

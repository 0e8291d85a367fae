//! Gram-matrix style loss and the two particle regularizers.
//!
//! The style loss compares channel correlations of feature maps between the
//! rendered image and a reference:
//!
//! ```text
//! G_mn      = Σ_i F_mi F_ni                      (per style layer)
//! L_style   = Σ_l w_l / (4 C_l² P_l²) Σ_mn (G_mn(I) - G_mn(I_s))²
//! ```
//!
//! with `P_l = H_l * W_l`. The regularizers act on particle quantities:
//! `reg_density` keeps the net attribute change near zero while pushing
//! individual changes away from zero, `reg_position` penalizes deviation of
//! the SPH density from a rest-density target.

use crate::bank::{backward_to_pixels, forward_states, FeatureMap, FilterBank};
use crate::error::{Error, Result};
use crate::grid::ScalarGrid;
use crate::image::Image;
use crate::transfer::{sph_density_backward, sph_density_forward};

/// Guard inside the logarithm of the density regularizer; the raw formula
/// is singular at a zero change, which is exactly the starting point.
pub const REG_DENSITY_EPS: f64 = 1e-8;

/// Gram matrix of a feature map: `C x C`, row-major.
pub fn gram(map: &FeatureMap) -> Vec<f64> {
    let c = map.channels;
    let p = map.pixel_count();
    let mut g = vec![0.0; c * c];
    for m in 0..c {
        let fm = &map.data[m * p..(m + 1) * p];
        for n in m..c {
            let fn_ = &map.data[n * p..(n + 1) * p];
            let dot: f64 = fm.iter().zip(fn_).map(|(a, b)| a * b).sum();
            g[m * c + n] = dot;
            g[n * c + m] = dot;
        }
    }
    g
}

/// Per-layer Gram matrices of a style reference image.
#[derive(Debug, Clone)]
pub struct StyleTarget {
    /// One Gram matrix per bank style layer, in `style_layers` order.
    pub grams: Vec<Vec<f64>>,
    /// Where the target came from (file name, "initial render", ...).
    pub provenance: String,
}

impl StyleTarget {
    pub fn from_image(image: &Image, bank: &FilterBank, provenance: impl Into<String>) -> Result<Self> {
        let adapted = adapt_channels(image, bank)?;
        let states = forward_states(&adapted, bank)?;
        let grams = bank
            .style_layers
            .iter()
            .map(|sl| gram(&states[sl.layer].output))
            .collect();
        Ok(StyleTarget { grams, provenance: provenance.into() })
    }
}

/// Replicate grayscale to RGB when the bank expects three channels.
fn adapt_channels(image: &Image, bank: &FilterBank) -> Result<Image> {
    if image.channels == bank.input_channels() {
        Ok(image.clone())
    } else if image.channels == 1 && bank.input_channels() == 3 {
        Ok(image.to_rgb())
    } else {
        Err(Error::invalid(format!(
            "image has {} channels but the bank expects {}",
            image.channels,
            bank.input_channels()
        )))
    }
}

fn check_target(bank: &FilterBank, target: &StyleTarget) -> Result<()> {
    if target.grams.len() != bank.style_layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} gram matrices, bank selects {} style layers",
            target.grams.len(),
            bank.style_layers.len()
        )));
    }
    Ok(())
}

/// Style loss of `image` against `target` through `bank`.
pub fn style_loss(image: &Image, bank: &FilterBank, target: &StyleTarget) -> Result<f64> {
    check_target(bank, target)?;
    let adapted = adapt_channels(image, bank)?;
    let states = forward_states(&adapted, bank)?;
    let mut loss = 0.0;
    for (si, sl) in bank.style_layers.iter().enumerate() {
        let map = &states[sl.layer].output;
        let g = gram(map);
        let c = map.channels as f64;
        let p = map.pixel_count() as f64;
        let norm = 1.0 / (4.0 * c * c * p * p);
        let miss: f64 = g
            .iter()
            .zip(target.grams[si].iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        loss += sl.weight * norm * miss;
    }
    Ok(loss)
}

/// Style loss and its gradient with respect to the image pixels
/// (channel-interleaved, matching the input image layout; gradients of a
/// replicated grayscale image are summed back to the single channel).
pub fn style_loss_backward(
    image: &Image,
    bank: &FilterBank,
    target: &StyleTarget,
) -> Result<(f64, Vec<f64>)> {
    check_target(bank, target)?;
    let adapted = adapt_channels(image, bank)?;
    let states = forward_states(&adapted, bank)?;

    let mut loss = 0.0;
    let mut grad_by_layer: Vec<Option<Vec<f64>>> = vec![None; bank.layers.len()];
    for (si, sl) in bank.style_layers.iter().enumerate() {
        let map = &states[sl.layer].output;
        let g = gram(map);
        let c = map.channels;
        let p = map.pixel_count();
        let norm = 1.0 / (4.0 * (c * c * p * p) as f64);
        let diff: Vec<f64> = g.iter().zip(target.grams[si].iter()).map(|(a, b)| a - b).collect();
        loss += sl.weight * norm * diff.iter().map(|d| d * d).sum::<f64>();

        // dL/dF_mi = 4 * w * norm * Σ_n diff_mn F_ni (diff is symmetric).
        let scale = 4.0 * sl.weight * norm;
        let mut grad_map = vec![0.0; c * p];
        for m in 0..c {
            for n in 0..c {
                let d = diff[m * c + n];
                if d == 0.0 {
                    continue;
                }
                let fn_ = &map.data[n * p..(n + 1) * p];
                let gm = &mut grad_map[m * p..(m + 1) * p];
                for (gv, &fv) in gm.iter_mut().zip(fn_) {
                    *gv += scale * d * fv;
                }
            }
        }
        let slot = grad_by_layer[sl.layer].get_or_insert_with(|| vec![0.0; c * p]);
        for (a, b) in slot.iter_mut().zip(grad_map) {
            *a += b;
        }
    }

    let planar = backward_to_pixels(bank, &states, &grad_by_layer);
    // Planar (C, H, W) back to interleaved; collapse replicated channels.
    let (w, h) = (image.width, image.height);
    let mut grad = vec![0.0; w * h * image.channels];
    for y in 0..h {
        for x in 0..w {
            for c in 0..adapted.channels {
                let g = planar[c * h * w + y * w + x];
                let cc = if image.channels == 1 { 0 } else { c };
                grad[(y * w + x) * image.channels + cc] += g;
            }
        }
    }
    Ok((loss, grad))
}

/// Mass-conservation regularizer on per-particle changes:
///
/// ```text
/// R(Δ) = (Σ_p Δ_p)² - Σ_p ln(|Δ_p| + ε)
/// ```
///
/// Returns the value and its gradient. The sign of a zero change is taken
/// as zero, so the log term contributes no gradient exactly at zero.
pub fn reg_density(deltas: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    let total: f64 = deltas.iter().sum();
    let mut value = total * total;
    let mut grad = vec![0.0; deltas.len()];
    for (g, &d) in grad.iter_mut().zip(deltas) {
        value -= (d.abs() + epsilon).ln();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = 2.0 * total - sign / (d.abs() + epsilon);
    }
    (value, grad)
}

/// Distribution regularizer: squared distance between the SPH density of
/// the particle positions and a rest-density target grid, summed over all
/// nodes. Returns the value and the position gradient.
pub fn reg_position(
    positions: &[f64],
    dim: usize,
    masses: &[f64],
    h: f64,
    rho0: &ScalarGrid,
) -> Result<(f64, Vec<f64>)> {
    let (density, cache) = sph_density_forward(positions, dim, masses, h, &rho0.spec)?;
    let mut value = 0.0;
    let mut grad_grid = ScalarGrid::zeros(rho0.spec.clone());
    for (idx, (d, r0)) in density.values.iter().zip(rho0.values.iter()).enumerate() {
        let diff = d - r0;
        value += diff * diff;
        grad_grid.values[idx] = 2.0 * diff;
    }
    let grad_positions = sph_density_backward(&cache, &grad_grid)?;
    Ok((value, grad_positions))
}

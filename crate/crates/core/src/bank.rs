//! Convolutional filter bank used as the feature extractor for the style
//! loss.
//!
//! A bank is an ordered stack of layers, each `conv (stride 1, zero padding
//! k/2) -> bias -> ReLU -> optional 2x2 average pool`. Banks are data: they
//! can be loaded from a file (see [`crate::io`]) or generated procedurally
//! with [`FilterBank::default_bank`]. A subset of layers is marked as style
//! layers; those feature maps feed the Gram-matrix loss.
//!
//! Feature maps are stored planar: `data[c * H * W + y * W + x]`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd square kernel size.
    pub kernel_size: usize,
    /// Weights in `(out, in, row, col)` order, length `out*in*k*k`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Apply a 2x2 average pool (stride 2) after the activation.
    pub pool: bool,
}

impl ConvLayer {
    #[inline]
    fn weight(&self, co: usize, ci: usize, dy: usize, dx: usize) -> f64 {
        let k = self.kernel_size;
        self.weights[((co * self.in_channels + ci) * k + dy) * k + dx]
    }
}

/// A layer index selected for the style loss together with its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleLayer {
    pub layer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct FilterBank {
    pub layers: Vec<ConvLayer>,
    pub style_layers: Vec<StyleLayer>,
}

impl FilterBank {
    pub fn new(layers: Vec<ConvLayer>, style_layers: Vec<StyleLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("filter bank needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.kernel_size % 2 == 0 || layer.kernel_size == 0 {
                return Err(Error::invalid(format!(
                    "layer {i}: kernel size must be odd, got {}",
                    layer.kernel_size
                )));
            }
            let k = layer.kernel_size;
            if layer.weights.len() != layer.out_channels * layer.in_channels * k * k {
                return Err(Error::invalid(format!("layer {i}: weight count mismatch")));
            }
            if layer.bias.len() != layer.out_channels {
                return Err(Error::invalid(format!("layer {i}: bias count mismatch")));
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite parameters")));
            }
            if i > 0 && layers[i - 1].out_channels != layer.in_channels {
                return Err(Error::invalid(format!(
                    "layer {i}: in_channels {} does not chain from previous out_channels {}",
                    layer.in_channels,
                    layers[i - 1].out_channels
                )));
            }
        }
        if style_layers.is_empty() {
            return Err(Error::invalid("filter bank needs at least one style layer"));
        }
        for sl in &style_layers {
            if sl.layer >= layers.len() {
                return Err(Error::invalid(format!("style layer index {} out of range", sl.layer)));
            }
            if !(sl.weight.is_finite() && sl.weight >= 0.0) {
                return Err(Error::invalid("style layer weights must be >= 0"));
            }
        }
        Ok(FilterBank { layers, style_layers })
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    /// The built-in three-layer bank (3 -> 16 -> 32 -> 64 channels, 3x3
    /// kernels, pooling after the first two layers, every layer a style
    /// layer with unit weight). Weights are seeded random with
    /// orthonormalized rows scaled by sqrt(2), biases zero.
    pub fn default_bank(seed: u64) -> FilterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (cin, cout, pool) in [(3usize, 16usize, true), (16, 32, true), (32, 64, false)] {
            layers.push(ConvLayer {
                in_channels: cin,
                out_channels: cout,
                kernel_size: 3,
                weights: orthogonalish(&mut rng, cout, cin * 9),
                bias: vec![0.0; cout],
                pool,
            });
        }
        let style_layers = (0..layers.len()).map(|l| StyleLayer { layer: l, weight: 1.0 }).collect();
        FilterBank::new(layers, style_layers).expect("built-in bank is valid")
    }
}

/// Standard-normal sample via Box-Muller on the seeded stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random rows orthonormalized by Gram-Schmidt, then scaled by sqrt(2)
/// to keep ReLU activations from decaying through the stack.
fn orthogonalish(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    assert!(rows <= cols, "cannot orthonormalize {rows} rows of length {cols}");
    let mut m: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| normal(rng)).collect()).collect();
    for r in 0..rows {
        for prev in 0..r {
            let dot: f64 = m[r].iter().zip(&m[prev]).map(|(a, b)| a * b).sum();
            for c in 0..cols {
                m[r][c] -= dot * m[prev][c];
            }
        }
        let norm: f64 = m[r].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut m[r] {
            *v /= norm;
        }
    }
    for row in &mut m {
        for v in row {
            *v *= std::f64::consts::SQRT_2;
        }
    }
    m.into_iter().flatten().collect()
}

/// A planar feature map (`data[c * H * W + y * W + x]`).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerState {
    /// conv + bias output, before ReLU (planar, conv_h x conv_w).
    pre_relu: Vec<f64>,
    conv_h: usize,
    conv_w: usize,
    /// Layer output after ReLU and optional pooling.
    pub(crate) output: FeatureMap,
}

pub(crate) fn image_to_planar(image: &Image) -> Vec<f64> {
    let (w, h, c) = (image.width, image.height, image.channels);
    let mut planar = vec![0.0; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                planar[ch * h * w + y * w + x] = image.pixels[(y * w + x) * c + ch];
            }
        }
    }
    planar
}

fn conv_forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = layer.kernel_size;
    let pad = k / 2;
    let mut out = vec![0.0; layer.out_channels * h * w];
    for co in 0..layer.out_channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = layer.bias[co];
                for ci in 0..layer.in_channels {
                    let plane = &input[ci * h * w..(ci + 1) * h * w];
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = x as isize + dx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += layer.weight(co, ci, dy, dx) * plane[sy as usize * w + sx as usize];
                        }
                    }
                }
                out[co * h * w + y * w + x] = acc;
            }
        }
    }
    out
}

/// Adjoint of `conv_forward` with respect to the input plane stack.
fn conv_backward_input(layer: &ConvLayer, grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = layer.kernel_size;
    let pad = k / 2;
    let mut grad_in = vec![0.0; layer.in_channels * h * w];
    for co in 0..layer.out_channels {
        let gplane = &grad_out[co * h * w..(co + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let g = gplane[y * w + x];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..layer.in_channels {
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = x as isize + dx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            grad_in[ci * h * w + sy as usize * w + sx as usize] +=
                                g * layer.weight(co, ci, dy, dx);
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn avg_pool(input: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += input[c * h * w + (2 * y + dy) * w + (2 * x + dx)];
                    }
                }
                out[c * oh * ow + y * ow + x] = acc * 0.25;
            }
        }
    }
    (out, oh, ow)
}

fn avg_pool_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut grad_in = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out[c * oh * ow + y * ow + x] * 0.25;
                for dy in 0..2 {
                    for dx in 0..2 {
                        grad_in[c * h * w + (2 * y + dy) * w + (2 * x + dx)] = g;
                    }
                }
            }
        }
    }
    grad_in
}

/// Run the full stack, keeping every intermediate needed by the adjoint.
pub(crate) fn forward_states(
    image: &Image,
    bank: &FilterBank,
) -> Result<Vec<LayerState>> {
    if image.channels != bank.input_channels() {
        return Err(Error::invalid(format!(
            "image has {} channels but the bank expects {}",
            image.channels,
            bank.input_channels()
        )));
    }
    let mut states = Vec::with_capacity(bank.layers.len());
    let mut current = image_to_planar(image);
    let (mut h, mut w) = (image.height, image.width);
    for layer in &bank.layers {
        let pre_relu = conv_forward(layer, &current, h, w);
        let mut activated: Vec<f64> = pre_relu.iter().map(|&v| v.max(0.0)).collect();
        let (conv_h, conv_w) = (h, w);
        if layer.pool {
            let (pooled, oh, ow) = avg_pool(&activated, layer.out_channels, h, w);
            activated = pooled;
            h = oh;
            w = ow;
        }
        let output = FeatureMap { channels: layer.out_channels, height: h, width: w, data: activated };
        current = output.data.clone();
        states.push(LayerState { pre_relu, conv_h, conv_w, output });
    }
    Ok(states)
}

/// Feature maps of the bank's style layers, in `style_layers` order.
///
/// Errors with invalid-argument when the image channel count does not match
/// the bank input (grayscale inputs are adapted by the loss entry points,
/// not here).
pub fn feature_forward(image: &Image, bank: &FilterBank) -> Result<Vec<FeatureMap>> {
    let states = forward_states(image, bank)?;
    Ok(bank
        .style_layers
        .iter()
        .map(|sl| states[sl.layer].output.clone())
        .collect())
}

/// Propagate per-layer output gradients down to image pixels (planar).
/// `grad_by_layer[l]`, when present, must match layer `l`'s output length.
pub(crate) fn backward_to_pixels(
    bank: &FilterBank,
    states: &[LayerState],
    grad_by_layer: &[Option<Vec<f64>>],
) -> Vec<f64> {
    let mut grad: Vec<f64> = Vec::new();
    for l in (0..bank.layers.len()).rev() {
        let layer = &bank.layers[l];
        let state = &states[l];
        let mut g_out = if grad.is_empty() {
            vec![0.0; state.output.data.len()]
        } else {
            grad
        };
        if let Some(extra) = &grad_by_layer[l] {
            for (a, b) in g_out.iter_mut().zip(extra.iter()) {
                *a += b;
            }
        }
        let mut g = if layer.pool {
            avg_pool_backward(&g_out, layer.out_channels, state.conv_h, state.conv_w)
        } else {
            g_out
        };
        // ReLU: subgradient at 0 is 0.
        for (gv, &pre) in g.iter_mut().zip(state.pre_relu.iter()) {
            if pre <= 0.0 {
                *gv = 0.0;
            }
        }
        grad = conv_backward_input(layer, &g, state.conv_h, state.conv_w);
    }
    grad
}

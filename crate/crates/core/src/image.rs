//! Image buffers exchanged between the renderers and the style loss.

use crate::error::{Error, Result};

/// Channel-interleaved image with non-negative real pixel values.
/// Index layout is `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dims must be >= 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("image channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image expects {} pixel values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("image pixels must be finite and non-negative"));
        }
        Ok(Image { width, height, channels, pixels })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Replicate a single-channel image to three channels. Three-channel
    /// input is returned unchanged; classifier-style filter banks expect RGB.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(self.pixels.len() * 3);
        for &v in &self.pixels {
            pixels.extend_from_slice(&[v, v, v]);
        }
        Image { width: self.width, height: self.height, channels: 3, pixels }
    }
}

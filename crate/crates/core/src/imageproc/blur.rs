use serde::{Deserialize, Serialize};

use super::{round_u8, ImageU8};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurParams {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for BlurParams {
    fn default() -> Self {
        Self { kernel_size: 5, sigma: 1.0 }
    }
}

impl BlurParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("blur.kernel_size", format!("must be odd, got {}", self.kernel_size)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("blur.sigma", format!("must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps, centered.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::Parameter(format!("gaussian kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur with replicated borders; channels are filtered
/// independently and rounded once at the end.
pub fn gaussian_blur(img: &ImageU8, kernel_size: usize, sigma: f64) -> Result<ImageU8> {
    let kernel = gaussian_kernel(kernel_size, sigma)?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if h == 0 || w == 0 {
        return Ok(img.clone());
    }
    let r = (kernel_size / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;

    let mut horiz = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + t as isize - r, w);
                    acc += k * img.get(y, sx, ch) as f64;
                }
                horiz[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut data = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + t as isize - r, h);
                    acc += k * horiz[(sy * w + x) * c + ch];
                }
                data[(y * w + x) * c + ch] = round_u8(acc);
            }
        }
    }
    ImageU8::new(h, w, c, data)
}

//! Image containers and the preprocessing chain: bilinear resize, CLAHE,
//! Gaussian blur and scaling to `[0, 1]`.

mod blur;
mod clahe;
mod io;
mod resize;

pub use blur::{gaussian_blur, gaussian_kernel, BlurParams};
pub use clahe::{clahe, clipped_tile_histograms, rgb_to_ycbcr, ycbcr_to_rgb, ClaheParams, TileHistogram, CLAHE_BINS};
pub use io::{read_image, write_image, SUPPORTED_EXTENSIONS};
pub use resize::resize_bilinear;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

/// Single-precision raster with the same layout as [`ImageU8`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

fn check_layout(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::Dimension(format!("unsupported channel count {channels}; expected 1 or 3")));
    }
    if height * width * channels != len {
        return Err(Error::Dimension(format!(
            "{height}x{width}x{channels} image needs {} samples, got {len}",
            height * width * channels
        )));
    }
    Ok(())
}

macro_rules! image_accessors {
    ($ty:ident, $elem:ty) => {
        impl $ty {
            pub fn new(height: usize, width: usize, channels: usize, data: Vec<$elem>) -> Result<Self> {
                check_layout(height, width, channels, data.len())?;
                Ok(Self { height, width, channels, data })
            }

            pub fn filled(height: usize, width: usize, channels: usize, value: $elem) -> Result<Self> {
                Self::new(height, width, channels, vec![value; height * width * channels])
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn channels(&self) -> usize {
                self.channels
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<$elem> {
                self.data
            }

            #[inline]
            pub fn get(&self, y: usize, x: usize, c: usize) -> $elem {
                self.data[(y * self.width + x) * self.channels + c]
            }

            #[inline]
            pub fn set(&mut self, y: usize, x: usize, c: usize, v: $elem) {
                self.data[(y * self.width + x) * self.channels + c] = v;
            }
        }
    };
}

image_accessors!(ImageU8, u8);
image_accessors!(ImageF32, f32);

impl ImageU8 {
    /// Replicates a single channel into RGB; RGB input is returned unchanged.
    pub fn to_rgb(&self) -> ImageU8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageU8 { height: self.height, width: self.width, channels: 3, data }
    }
}

impl ImageF32 {
    /// Quantizes `[0, 1]` samples back to bytes (nearest, ties away from zero).
    pub fn to_u8(&self) -> ImageU8 {
        let data = self.data.iter().map(|&v| round_u8(v as f64 * 255.0)).collect();
        ImageU8 { height: self.height, width: self.width, channels: self.channels, data }
    }
}

/// Nearest integer with ties away from zero, clamped to the byte range.
#[inline]
pub fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Maps each sample `v` to `v / 255`.
pub fn normalize01(img: &ImageU8) -> ImageF32 {
    ImageF32 {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.data.iter().map(|&v| v as f32 / 255.0).collect(),
    }
}

/// Parameters of the resize -> CLAHE -> blur chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    /// Output height and width in pixels.
    pub size: usize,
    pub clahe: ClaheParams,
    pub blur: BlurParams,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self { size: 224, clahe: ClaheParams::default(), blur: BlurParams::default() }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("size", "must be at least 1"));
        }
        self.clahe.validate()?;
        self.blur.validate()
    }
}

/// Resize, then CLAHE, then Gaussian blur. The byte output is what gets
/// stored on disk; [`normalize01`] is applied when images are loaded.
pub fn preprocess(img: &ImageU8, params: &PreprocessParams) -> Result<ImageU8> {
    let resized = resize_bilinear(img, params.size, params.size)?;
    let enhanced = clahe(&resized, &params.clahe)?;
    gaussian_blur(&enhanced, params.blur.kernel_size, params.blur.sigma)
}

/// The full chain including scaling to `[0, 1]`.
pub fn preprocess_to_f32(img: &ImageU8, params: &PreprocessParams) -> Result<ImageF32> {
    preprocess(img, params).map(|out| normalize01(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_validated() {
        assert!(ImageU8::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageU8::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(ImageU8::new(2, 2, 3, vec![0; 12]).is_ok());
    }

    #[test]
    fn normalize01_examples() {
        let img = ImageU8::new(1, 3, 1, vec![0, 255, 128]).unwrap();
        let f = normalize01(&img);
        assert_eq!(f.data()[0], 0.0);
        assert_eq!(f.data()[1], 1.0);
        assert!((f.data()[2] - 128.0 / 255.0).abs() < 1e-7);
        assert!((f.data()[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn round_u8_ties_away_from_zero() {
        assert_eq!(round_u8(2.5), 3);
        assert_eq!(round_u8(2.4999), 2);
        assert_eq!(round_u8(-3.0), 0);
        assert_eq!(round_u8(300.0), 255);
    }

    #[test]
    fn preprocess_chain_is_deterministic() {
        let data: Vec<u8> = (0..40 * 30 * 3).map(|i| ((i * 37 + i / 7) % 251) as u8).collect();
        let img = ImageU8::new(40, 30, 3, data).unwrap();
        let params = PreprocessParams { size: 32, ..Default::default() };
        let a = preprocess_to_f32(&img, &params).unwrap();
        let b = preprocess_to_f32(&img, &params).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!((a.height(), a.width(), a.channels()), (32, 32, 3));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

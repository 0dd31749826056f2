use std::fs;
use std::io::Write;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ImageEncoder, ImageFormat};

use super::ImageU8;
use crate::error::{Error, Result};

/// File extensions accepted by [`read_image`] and [`write_image`].
pub const SUPPORTED_EXTENSIONS: &[&str] = &["png", "ppm", "pgm"];

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Reads an 8-bit PNG (gray or RGB) or a binary PPM/PGM file.
///
/// Alpha channels are dropped; higher bit depths are reduced to 8 bits.
pub fn read_image(path: &Path) -> Result<ImageU8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = match extension(path).as_deref() {
        Some("png") => ImageFormat::Png,
        Some("ppm") | Some("pgm") => ImageFormat::Pnm,
        _ => {
            return Err(Error::Image { path: path.into(), message: "unsupported image extension".into() });
        }
    };
    let decoded = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => ImageU8::new(h, w, 1, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            ImageU8::new(h, w, 1, decoded.to_luma8().into_raw())
        }
        other => ImageU8::new(h, w, 3, other.to_rgb8().into_raw()),
    }
}

fn pnm_bytes(img: &ImageU8) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Writes PNG, binary PPM (RGB) or binary PGM (gray) depending on the
/// file extension. Parent directories are created as needed.
pub fn write_image(path: &Path, img: &ImageU8) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = match extension(path).as_deref() {
        Some("png") => {
            let color = if img.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
            let mut buf = Vec::new();
            PngEncoder::new(&mut buf)
                .write_image(img.data(), img.width() as u32, img.height() as u32, color)
                .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
            buf
        }
        Some("ppm") if img.channels() == 3 => pnm_bytes(img),
        Some("pgm") if img.channels() == 1 => pnm_bytes(img),
        _ => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("cannot write a {}-channel image with this extension", img.channels()),
            })
        }
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

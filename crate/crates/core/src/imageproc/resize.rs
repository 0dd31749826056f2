use super::{round_u8, ImageU8};
use crate::error::{Error, Result};

/// Source coordinate and blend weight for one output index under the
/// half-pixel-center convention, clamped to the source extent.
pub(crate) fn sample_axis(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageU8, out_h: usize, out_w: usize) -> Result<ImageU8> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("cannot resize a {h}x{w} image")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!("resize target {out_h}x{out_w} must be at least 1x1")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let cols: Vec<_> = (0..out_w).map(|x| sample_axis(x, w, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) as f64 * (1.0 - fx) + img.get(y0, x1, ch) as f64 * fx;
                let bottom = img.get(y1, x0, ch) as f64 * (1.0 - fx) + img.get(y1, x1, ch) as f64 * fx;
                data.push(round_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    ImageU8::new(out_h, out_w, c, data)
}

//! Grad-CAM over transformer tokens.
//!
//! The feature map is the token activation matrix `A` (`[seq_len, dim]`)
//! produced by one transformer block. Channel weights are the gradients of
//! a pre-softmax class logit with respect to `A`, averaged over all tokens.
//! Each patch token scores `ReLU(sum_c w_c * A[t, c])`; the class token is
//! dropped, the scores are laid out on the patch grid and min-max
//! normalized.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{round_u8, ImageF32, ImageU8};
use crate::model::{bind, images_to_batch, ModelParams};
use crate::tensor::{Scalar, Tape};

/// Weight of the color ramp when blending an overlay over its image.
pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major patch scores in `[0, 1]`.
    pub values: Vec<f32>,
    pub target_class: usize,
    pub target_block: usize,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid_w + col]
    }

    /// Row-major index of the largest value (first one on ties).
    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// One line per grid row, values with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.grid_w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Bilinear upsampling of the grid to `height x width` pixels with
    /// half-pixel centers, row-major.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f32> {
        let axis = |i: usize, src: usize, dst: usize| {
            let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(src - 1), s - lo as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| axis(x, self.grid_w, width)).collect();
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, self.grid_h, height);
            for &(x0, x1, fx) in &cols {
                let at = |r: usize, c: usize| self.get(r, c) as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
        out
    }

    /// Mean upsampled value inside and outside the pixel box
    /// `[x0, x1) x [y0, y1)` of a `height x width` image.
    pub fn region_means(&self, height: usize, width: usize, bbox: [usize; 4]) -> Result<(f64, f64)> {
        let [x0, y0, x1, y1] = bbox;
        if x0 >= x1 || y0 >= y1 || x1 > width || y1 > height {
            return Err(Error::Parameter(format!("box {bbox:?} is empty or outside a {height}x{width} image")));
        }
        let up = self.upsample(height, width);
        let (mut inside, mut outside) = (0.0, 0.0);
        for y in 0..height {
            for x in 0..width {
                let v = up[y * width + x] as f64;
                if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                    inside += v;
                } else {
                    outside += v;
                }
            }
        }
        let n_in = ((x1 - x0) * (y1 - y0)) as f64;
        let n_out = (height * width) as f64 - n_in;
        Ok((inside / n_in, if n_out > 0.0 { outside / n_out } else { 0.0 }))
    }
}

/// Min-max normalization to `[0, 1]`; constant input maps to all zeros.
pub fn normalize_map(raw: &[f64]) -> Vec<f32> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Grad-CAM heatmap of `class_idx` for one image.
///
/// `target_block` indexes the transformer blocks (including the extra
/// block of a customized model) and defaults to the last one.
pub fn compute_gradcam<T: Scalar>(
    params: &ModelParams<T>,
    image: &ImageF32,
    class_idx: usize,
    target_block: Option<usize>,
) -> Result<Heatmap> {
    let config = params.config();
    if class_idx >= config.num_classes {
        return Err(Error::Index(format!("class {class_idx} out of range for {} classes", config.num_classes)));
    }
    let blocks = config.num_blocks();
    let block = target_block.unwrap_or(blocks - 1);
    if block >= blocks {
        return Err(Error::Parameter(format!("target block {block} out of range for {blocks} blocks")));
    }
    let images = images_to_batch(&[image])?.cast::<T>();
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let trace = bound.forward(&mut tape, &images, None)?;
    let score = tape.pick(trace.logits, class_idx)?;
    tape.backward(score)?;

    let features = trace.block_outputs[block];
    let acts = tape.value(features).data();
    let grads = tape.grad(features);
    let (seq, dim) = (config.seq_len(), config.embed_dim);
    let mut weights = vec![0.0f64; dim];
    if let Some(g) = grads {
        for row in g.chunks(dim) {
            for (w, &v) in weights.iter_mut().zip(row) {
                *w += v.to_f64();
            }
        }
    }
    weights.iter_mut().for_each(|w| *w /= seq as f64);
    let raw: Vec<f64> = acts
        .chunks(dim)
        .skip(1)
        .map(|row| row.iter().zip(&weights).map(|(&a, w)| a.to_f64() * *w).sum::<f64>().max(0.0))
        .collect();
    let grid = config.grid();
    Ok(Heatmap { grid_h: grid, grid_w: grid, values: normalize_map(&raw), target_class: class_idx, target_block: block })
}

/// Blends a blue-to-red rendering of `heatmap` over `image`.
///
/// Each pixel becomes `(1 - a) * image + a * (255 v, 0, 255 (1 - v))` with
/// `a = OVERLAY_ALPHA` and `v` the bilinearly upsampled heatmap value.
/// Grayscale input is replicated to RGB first.
pub fn render_overlay(heatmap: &Heatmap, image: &ImageU8) -> ImageU8 {
    let rgb = image.to_rgb();
    let (h, w) = (rgb.height(), rgb.width());
    let up = heatmap.upsample(h, w);
    let mut data = Vec::with_capacity(h * w * 3);
    for (px, &v) in rgb.data().chunks(3).zip(&up) {
        let v = v.clamp(0.0, 1.0) as f64;
        let ramp = [255.0 * v, 0.0, 255.0 * (1.0 - v)];
        for c in 0..3 {
            data.push(round_u8((1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * ramp[c]));
        }
    }
    ImageU8::new(h, w, 3, data).expect("overlay has the input's dimensions")
}

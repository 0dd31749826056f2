use serde::{Deserialize, Serialize};

use super::{round_u8, ImageU8};
use crate::error::{Error, Result};

/// Histogram bins used by CLAHE (one per byte value).
pub const CLAHE_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Clip limit as a multiple of the mean bin occupancy.
    pub clip_factor: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { tiles_x: 8, tiles_y: 8, clip_factor: 2.0 }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::config("clahe.tiles", "tile counts must be at least 1"));
        }
        if !(self.clip_factor >= 1.0) {
            return Err(Error::config("clahe.clip_factor", format!("must be >= 1.0, got {}", self.clip_factor)));
        }
        Ok(())
    }

    /// Per-tile clip limit: `max(1, floor(clip_factor * pixels / bins))`.
    pub fn clip_limit(&self, tile_pixels: usize) -> u64 {
        let raw = self.clip_factor * tile_pixels as f64 / CLAHE_BINS as f64;
        if raw >= tile_pixels as f64 {
            tile_pixels.max(1) as u64
        } else {
            (raw.floor() as u64).max(1)
        }
    }
}

/// A tile's histogram after clipping and redistribution.
#[derive(Clone, Debug)]
pub struct TileHistogram {
    pub bins: Vec<u64>,
    pub clip_limit: u64,
    /// Counts removed by clipping (and spread back over all bins).
    pub excess: u64,
    pub pixels: u64,
}

/// Integer BT.601 (full range) forward transform.
pub fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> (u8, i32, i32) {
    let (r, g, b) = (r as i32, g as i32, b as i32);
    let y = (19595 * r + 38470 * g + 7471 * b + 32768) >> 16;
    let cb = ((-11059 * r - 21709 * g + 32768 * b + 32768) >> 16) + 128;
    let cr = ((32768 * r - 27439 * g - 5329 * b + 32768) >> 16) + 128;
    (y.clamp(0, 255) as u8, cb, cr)
}

/// Integer BT.601 (full range) inverse transform.
pub fn ycbcr_to_rgb(y: u8, cb: i32, cr: i32) -> (u8, u8, u8) {
    let (y, cb, cr) = (y as i32, cb - 128, cr - 128);
    let r = y + ((91881 * cr + 32768) >> 16);
    let g = y + ((-22554 * cb - 46802 * cr + 32768) >> 16);
    let b = y + ((116130 * cb + 32768) >> 16);
    (r.clamp(0, 255) as u8, g.clamp(0, 255) as u8, b.clamp(0, 255) as u8)
}

/// Side of a tile along an axis of `len` pixels split into `tiles`. The
/// plane is padded by reflection up to `tiles * side`, so all tiles hold
/// the same number of pixels.
fn tile_side(len: usize, tiles: usize) -> usize {
    len.div_ceil(tiles)
}

/// Reflect-101 index into `0..len` for a coordinate of the padded plane.
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

fn check_grid(h: usize, w: usize, params: &ClaheParams) -> Result<()> {
    params.validate().map_err(|e| Error::Parameter(e.to_string()))?;
    if h < params.tiles_y || w < params.tiles_x {
        return Err(Error::Parameter(format!(
            "{h}x{w} image is smaller than the {}x{} tile grid; use fewer tiles",
            params.tiles_y, params.tiles_x
        )));
    }
    Ok(())
}

/// Clipped and redistributed histograms of every tile of a single-channel
/// plane, in row-major tile order. When the grid does not divide the plane,
/// it is extended by reflect-101 padding on the bottom and right.
pub fn clipped_tile_histograms(plane: &[u8], h: usize, w: usize, params: &ClaheParams) -> Result<Vec<TileHistogram>> {
    check_grid(h, w, params)?;
    if plane.len() != h * w {
        return Err(Error::Dimension(format!("plane of {} samples is not {h}x{w}", plane.len())));
    }
    let (side_y, side_x) = (tile_side(h, params.tiles_y), tile_side(w, params.tiles_x));
    let mut out = Vec::with_capacity(params.tiles_y * params.tiles_x);
    for ty in 0..params.tiles_y {
        for tx in 0..params.tiles_x {
            let mut bins = vec![0u64; CLAHE_BINS];
            for py in ty * side_y..(ty + 1) * side_y {
                let row = reflect(py, h) * w;
                for px in tx * side_x..(tx + 1) * side_x {
                    bins[plane[row + reflect(px, w)] as usize] += 1;
                }
            }
            let pixels = (side_y * side_x) as u64;
            let clip_limit = params.clip_limit(pixels as usize);
            let mut excess = 0;
            for b in bins.iter_mut() {
                if *b > clip_limit {
                    excess += *b - clip_limit;
                    *b = clip_limit;
                }
            }
            let per_bin = excess / CLAHE_BINS as u64;
            let residue = (excess % CLAHE_BINS as u64) as usize;
            for b in bins.iter_mut() {
                *b += per_bin;
            }
            if residue > 0 {
                let step = (CLAHE_BINS / residue).max(1);
                for i in (0..CLAHE_BINS).step_by(step).take(residue) {
                    bins[i] += 1;
                }
            }
            out.push(TileHistogram { bins, clip_limit, excess, pixels });
        }
    }
    Ok(out)
}

fn tile_lut(hist: &TileHistogram) -> [f64; CLAHE_BINS] {
    let mut lut = [0.0; CLAHE_BINS];
    let mut cdf = 0u64;
    let scale = (CLAHE_BINS - 1) as f64 / hist.pixels.max(1) as f64;
    for (v, &count) in hist.bins.iter().enumerate() {
        cdf += count;
        lut[v] = round_u8(cdf as f64 * scale) as f64;
    }
    lut
}

/// Neighbouring tile indices and the weight of the second one, for a pixel
/// coordinate given the tile centers along that axis. Replicated at borders.
fn neighbours(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).unwrap_or(0);
    let j = (i + 1).min(last);
    let span = centers[j] - centers[i];
    (i, j, if span > 0.0 { (p - centers[i]) / span } else { 0.0 })
}

fn clahe_plane(plane: &[u8], h: usize, w: usize, params: &ClaheParams) -> Result<Vec<u8>> {
    let hists = clipped_tile_histograms(plane, h, w, params)?;
    let luts: Vec<[f64; CLAHE_BINS]> = hists.iter().map(tile_lut).collect();
    let centers = |len: usize, tiles: usize| {
        let side = tile_side(len, tiles) as f64;
        (0..tiles).map(|t| (t as f64 + 0.5) * side - 0.5).collect::<Vec<f64>>()
    };
    let row_centers = centers(h, params.tiles_y);
    let col_centers = centers(w, params.tiles_x);
    let col_nb: Vec<_> = (0..w).map(|x| neighbours(x, &col_centers)).collect();
    let tx = params.tiles_x;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let (ty0, ty1, fy) = neighbours(y, &row_centers);
        for (x, &(tx0, tx1, fx)) in col_nb.iter().enumerate() {
            let v = plane[y * w + x] as usize;
            let lut = |ty: usize, txi: usize| luts[ty * tx + txi][v];
            let top = lut(ty0, tx0) * (1.0 - fx) + lut(ty0, tx1) * fx;
            let bottom = lut(ty1, tx0) * (1.0 - fx) + lut(ty1, tx1) * fx;
            out[y * w + x] = round_u8(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Contrast-limited adaptive histogram equalization.
///
/// Grayscale images are equalized directly; RGB images are equalized on
/// BT.601 luma and recombined with the original chroma.
pub fn clahe(img: &ImageU8, params: &ClaheParams) -> Result<ImageU8> {
    let (h, w) = (img.height(), img.width());
    check_grid(h, w, params)?;
    if img.channels() == 1 {
        return ImageU8::new(h, w, 1, clahe_plane(img.data(), h, w, params)?);
    }
    let mut luma = Vec::with_capacity(h * w);
    let mut chroma = Vec::with_capacity(h * w);
    for px in img.data().chunks(3) {
        let (y, cb, cr) = rgb_to_ycbcr(px[0], px[1], px[2]);
        luma.push(y);
        chroma.push((cb, cr));
    }
    let equalized = clahe_plane(&luma, h, w, params)?;
    let data = equalized
        .iter()
        .zip(&chroma)
        .flat_map(|(&y, &(cb, cr))| {
            let (r, g, b) = ycbcr_to_rgb(y, cb, cr);
            [r, g, b]
        })
        .collect();
    ImageU8::new(h, w, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_equalization(plane: &[u8]) -> Vec<u8> {
        let mut hist = [0u64; 256];
        for &v in plane {
            hist[v as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for v in 0..256 {
            acc += hist[v];
            cdf[v] = acc;
        }
        let n = plane.len() as f64;
        plane.iter().map(|&v| (255.0 * cdf[v as usize] as f64 / n).round() as u8).collect()
    }

    #[test]
    fn constant_image_maps_to_constant() {
        for (h, w, channels) in [(32, 24, 1), (32, 24, 3), (8, 17, 3), (37, 53, 1)] {
            let img = ImageU8::filled(h, w, channels, 90).unwrap();
            let out = clahe(&img, &ClaheParams::default()).unwrap();
            let first = &out.data()[..channels];
            assert!(out.data().chunks(channels).all(|px| px == first));
        }
    }

    #[test]
    fn single_tile_unclipped_is_histogram_equalization() {
        let plane: Vec<u8> = (0..40 * 30).map(|i| ((i * 7919) % 97 + (i % 13) * 11) as u8).collect();
        let img = ImageU8::new(40, 30, 1, plane.clone()).unwrap();
        let params = ClaheParams { tiles_x: 1, tiles_y: 1, clip_factor: f64::INFINITY };
        let out = clahe(&img, &params).unwrap();
        assert_eq!(out.data(), plain_equalization(&plane).as_slice());
    }

    #[test]
    fn two_level_image_maps_to_cdf_endpoints() {
        let plane: Vec<u8> = (0..16 * 16).map(|i| if i % 2 == 0 { 50 } else { 200 }).collect();
        let img = ImageU8::new(16, 16, 1, plane).unwrap();
        let params = ClaheParams { tiles_x: 1, tiles_y: 1, clip_factor: 1e9 };
        let out = clahe(&img, &params).unwrap();
        // cdf(50) = 0.5 -> 127.5 rounds to 128; cdf(200) = 1 -> 255
        assert_eq!(out.get(0, 0, 0), 128);
        assert_eq!(out.get(0, 1, 0), 255);
    }

    #[test]
    fn clip_bound_holds_per_tile() {
        let plane: Vec<u8> = (0..64 * 64).map(|i| if i % 5 == 0 { 10 } else { (i % 3) as u8 * 80 }).collect();
        let params = ClaheParams::default();
        for t in clipped_tile_histograms(&plane, 64, 64, &params).unwrap() {
            let bound = t.clip_limit + t.excess.div_ceil(CLAHE_BINS as u64);
            assert!(t.bins.iter().all(|&b| b <= bound));
            assert_eq!(t.bins.iter().sum::<u64>(), t.pixels);
        }
    }

    #[test]
    fn image_smaller_than_grid_is_rejected() {
        let img = ImageU8::filled(4, 20, 1, 0).unwrap();
        let err = clahe(&img, &ClaheParams::default()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
        assert!(err.to_string().contains("fewer tiles"));
    }

    #[test]
    fn ycbcr_roundtrip_is_close() {
        for &(r, g, b) in &[(0u8, 0u8, 0u8), (255, 255, 255), (12, 200, 90), (250, 3, 128)] {
            let (y, cb, cr) = rgb_to_ycbcr(r, g, b);
            let (r2, g2, b2) = ycbcr_to_rgb(y, cb, cr);
            for (a, b) in [(r, r2), (g, g2), (b, b2)] {
                assert!((a as i32 - b as i32).abs() <= 2, "{a} vs {b}");
            }
        }
    }
}

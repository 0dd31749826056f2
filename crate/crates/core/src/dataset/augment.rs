use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derived_stem, rel_path, DatasetManifest, Origin, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::imageproc::{normalize01, write_image, ImageF32};
use crate::seed::{self, tag};

/// Augmented copies generated per original training image.
pub const AUGMENTED_COPIES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub hflip_prob: f64,
    /// Rotation angle is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Zoom factor range; values above 1 zoom in.
    pub zoom: [f64; 2],
    /// Multiplicative brightness range.
    pub brightness: [f64; 2],
    pub copies: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { hflip_prob: 0.5, rotation_deg: 15.0, zoom: [0.9, 1.1], brightness: [0.9, 1.1], copies: AUGMENTED_COPIES }
    }
}

impl AugmentationSpec {
    /// Every transform degenerate: the augmentation is the identity.
    pub fn identity() -> Self {
        Self { hflip_prob: 0.0, rotation_deg: 0.0, zoom: [1.0, 1.0], brightness: [1.0, 1.0], copies: AUGMENTED_COPIES }
    }

    pub fn validate(&self) -> Result<()> {
        if self.copies != AUGMENTED_COPIES {
            return Err(Error::config("augment.copies", format!("must be {AUGMENTED_COPIES}, got {}", self.copies)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("augment.hflip_prob", "must lie in [0, 1]"));
        }
        if !(self.rotation_deg >= 0.0) {
            return Err(Error::config("augment.rotation_deg", "must be non-negative"));
        }
        for (name, [lo, hi]) in [("augment.zoom", self.zoom), ("augment.brightness", self.brightness)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(name, format!("range [{lo}, {hi}] must be positive and ordered")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Bilinear sample with edge replication.
fn sample(img: &ImageF32, y: f64, x: f64, c: usize) -> f32 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, c) as f64 * (1.0 - fx) + img.get(y0, x1, c) as f64 * fx;
    let bottom = img.get(y1, x0, c) as f64 * (1.0 - fx) + img.get(y1, x1, c) as f64 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Resamples `img` through a map from output to source coordinates.
fn remap(img: &ImageF32, src_of: impl Fn(f64, f64) -> (f64, f64)) -> ImageF32 {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src_of(y as f64, x as f64);
            for c in 0..ch {
                out.set(y, x, c, sample(img, sy, sx, c));
            }
        }
    }
    out
}

fn hflip(img: &ImageF32) -> ImageF32 {
    let (w, ch) = (img.width(), img.channels());
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..w {
            for c in 0..ch {
                out.set(y, x, c, img.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

/// Random flip, rotation, zoom and brightness, applied in that order.
///
/// Geometric transforms rotate/scale about the image center with bilinear
/// resampling and edge replication; brightness scales samples and clamps
/// to `[0, 1]`. The same `draw_seed` always yields the same result.
pub fn apply_augmentation(img: &ImageF32, spec: &AugmentationSpec, draw_seed: u64) -> ImageF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let flip = rng.random::<f64>() < spec.hflip_prob;
    let angle = uniform(&mut rng, -spec.rotation_deg, spec.rotation_deg).to_radians();
    let zoom = uniform(&mut rng, spec.zoom[0], spec.zoom[1]);
    let gain = uniform(&mut rng, spec.brightness[0], spec.brightness[1]);

    let mut out = if flip { hflip(img) } else { img.clone() };
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    if angle != 0.0 {
        let (sin, cos) = angle.sin_cos();
        // inverse rotation maps output pixels back into the source
        out = remap(&out, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
        });
    }
    if zoom != 1.0 {
        out = remap(&out, |y, x| (cy + (y - cy) / zoom, cx + (x - cx) / zoom));
    }
    if gain != 1.0 {
        let g = gain as f32;
        for v in out.data_mut() {
            *v = (*v * g).clamp(0.0, 1.0);
        }
    }
    out
}

/// Adds [`AUGMENTED_COPIES`] augmented versions of every original training
/// record, written as PNG under `<root>/<subdir>/<class>/`.
///
/// The draw seed of each copy is derived from `(seed, record path, copy)`,
/// so the output does not depend on processing order.
pub fn augment_training_set(
    manifest: &DatasetManifest,
    spec: &AugmentationSpec,
    seed: u64,
    subdir: &str,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if manifest.records.iter().any(|r| !r.is_original()) {
        return Err(Error::Contract("manifest already contains augmented records".into()));
    }
    let root = Path::new(&manifest.root);
    let parents: Vec<&SampleRecord> =
        manifest.records.iter().filter(|r| r.split == Some(Split::Train)).collect();
    let generated = parents
        .par_iter()
        .map(|parent| {
            let img = normalize01(&manifest.load_image(parent)?);
            let stem = derived_stem(&parent.path);
            (1..=spec.copies as u32)
                .map(|copy| {
                    let draw_seed = seed::derive(seed, &[tag::AUGMENT, seed::hash_str(&parent.path), copy as u64]);
                    let out = apply_augmentation(&img, spec, draw_seed).to_u8();
                    let rel = rel_path(&[subdir, &parent.class_name, &format!("{stem}_aug{copy}.png")]);
                    write_image(&root.join(&rel), &out)?;
                    Ok(SampleRecord {
                        path: rel,
                        class_id: parent.class_id,
                        class_name: parent.class_name.clone(),
                        split: Some(Split::Train),
                        fold: parent.fold,
                        origin: Origin::Augmented { parent: parent.path.clone(), seed: draw_seed, copy },
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = manifest.records.clone();
    records.extend(generated.into_iter().flatten());
    let out = DatasetManifest::new(manifest.root.clone(), manifest.labels.clone(), manifest.seed, records);
    out.validate()?;
    Ok(out)
}

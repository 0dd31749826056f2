//! Procedural three-class leaf dataset for desk-scale experiments.
//!
//! Every image shows a green leaf texture. `early_blight` images carry one
//! dark filled disk, `late_blight` images one dark ring and `healthy`
//! images no lesion. Lesion bounding boxes are written to
//! `annotations.json` beside the class directories.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::{round_u8, write_image, ImageU8};
use crate::seed::{self, tag};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Disk,
    Ring,
    None,
}

impl LesionKind {
    pub const ALL: [LesionKind; 3] = [LesionKind::Disk, LesionKind::Ring, LesionKind::None];

    pub fn class_name(self) -> &'static str {
        match self {
            LesionKind::Disk => "early_blight",
            LesionKind::Ring => "late_blight",
            LesionKind::None => "healthy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { per_class: 500, size: 64, seed: 0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::config("synth.per_class", "must be at least 1"));
        }
        if self.size < 32 {
            return Err(Error::config("synth.size", format!("must be at least 32, got {}", self.size)));
        }
        Ok(())
    }
}

/// Lesion box `[x0, y0, x1, y1]` in pixels, end-exclusive.
pub type BoundingBox = [usize; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAnnotations {
    pub image_size: usize,
    pub seed: u64,
    /// File stem to lesion box; healthy images have no entry.
    pub lesions: BTreeMap<String, BoundingBox>,
}

impl SynthAnnotations {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Box of the image whose file name (any directory, any extension)
    /// has stem `stem`, rescaled to a `size x size` image.
    pub fn lesion_for(&self, file_path: &str, size: usize) -> Option<BoundingBox> {
        let name = file_path.rsplit('/').next().unwrap_or(file_path);
        let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
        let b = self.lesions.get(stem)?;
        let scale = |v: usize| (v * size).div_ceil(self.image_size).min(size);
        let floor = |v: usize| v * size / self.image_size;
        Some([floor(b[0]), floor(b[1]), scale(b[2]), scale(b[3])])
    }
}

fn file_stem(kind: LesionKind, index: usize) -> String {
    format!("{}_{index:04}", kind.class_name())
}

/// Renders one image of `kind`, returning it with its lesion box.
pub fn render_sample(kind: LesionKind, size: usize, rng: &mut ChaCha8Rng) -> (ImageU8, Option<BoundingBox>) {
    let s = size as f64;
    let base = [rng.random_range(40.0..70.0), rng.random_range(115.0..160.0), rng.random_range(30.0..60.0)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.05..0.2);
            (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(4.0..10.0))
        })
        .collect();
    let vein_angle = rng.random_range(0.0..std::f64::consts::PI);
    let (vx, vy) = (vein_angle.cos(), vein_angle.sin());
    let vein_offset = rng.random_range(-0.2 * s..0.2 * s);

    let lesion = match kind {
        LesionKind::None => None,
        _ => {
            let r = rng.random_range(0.09 * s..0.17 * s);
            let margin = r + 2.0;
            let cx = rng.random_range(margin..s - margin);
            let cy = rng.random_range(margin..s - margin);
            let width = rng.random_range(0.3 * r..0.45 * r);
            let color = [rng.random_range(55.0..85.0), rng.random_range(35.0..55.0), rng.random_range(15.0..30.0)];
            Some((cx, cy, r, width, color))
        }
    };

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * px + fy * py + ph).sin()).sum();
            let vein_dist = ((px - s / 2.0) * vy - (py - s / 2.0) * vx - vein_offset).abs();
            let vein = (1.5 - vein_dist).clamp(0.0, 1.0) * 30.0;
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = base[c] + shade + vein + rng.random_range(-6.0..6.0);
            }
            if let Some((cx, cy, r, width, color)) = lesion {
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let cover = match kind {
                    LesionKind::Disk => (r + 0.5 - d).clamp(0.0, 1.0),
                    _ => (width / 2.0 + 0.5 - (d - (r - width / 2.0)).abs()).clamp(0.0, 1.0),
                };
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - cover) + (color[c] + rng.random_range(-5.0..5.0)) * cover;
                }
            }
            data.extend(rgb.iter().map(|&v| round_u8(v)));
        }
    }
    let bbox = lesion.map(|(cx, cy, r, ..)| {
        let lo = |c: f64| (c - r - 0.5).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + r + 0.5).ceil() as usize).min(size);
        [lo(cx), lo(cy), hi(cx), hi(cy)]
    });
    (ImageU8::new(size, size, 3, data).expect("rendered buffer matches its size"), bbox)
}

/// Writes `<root>/<class>/<class>_NNNN.png` for every class and the lesion
/// annotations to `<root>/annotations.json`.
///
/// Image `i` of a class is drawn from `rng(seed, [SYNTH, class, i])`, so the
/// output does not depend on thread scheduling.
pub fn generate_synthetic(root: &Path, spec: &SynthSpec) -> Result<SynthAnnotations> {
    spec.validate()?;
    let jobs: Vec<(usize, LesionKind, usize)> = LesionKind::ALL
        .iter()
        .enumerate()
        .flat_map(|(k, &kind)| (0..spec.per_class).map(move |i| (k, kind, i)))
        .collect();
    let boxes = jobs
        .par_iter()
        .map(|&(k, kind, i)| {
            let mut rng = seed::rng(spec.seed, &[tag::SYNTH, k as u64, i as u64]);
            let (img, bbox) = render_sample(kind, spec.size, &mut rng);
            let stem = file_stem(kind, i);
            write_image(&root.join(kind.class_name()).join(format!("{stem}.png")), &img)?;
            Ok(bbox.map(|b| (stem, b)))
        })
        .collect::<Result<Vec<_>>>()?;
    let annotations =
        SynthAnnotations { image_size: spec.size, seed: spec.seed, lesions: boxes.into_iter().flatten().collect() };
    annotations.save(&root.join(ANNOTATIONS_FILE))?;
    Ok(annotations)
}

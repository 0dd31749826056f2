//! Run configuration: JSON file layered over defaults, then dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tinyvit_core::dataset::{AugmentationSpec, Split, SplitRatios};
use tinyvit_core::imageproc::{ClaheParams, PreprocessParams};
use tinyvit_core::metrics::{DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use tinyvit_core::model::ViTConfig;
use tinyvit_core::synth::SynthSpec;
use tinyvit_core::train::TrainConfig;
use tinyvit_core::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Directories and input files. Relative paths resolve against the work
/// directory; unset inputs default to the previous stage's output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub work_dir: Option<PathBuf>,
    /// Class-per-directory image tree; `<work>/data` when unset.
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Lesion annotations for `explain`; `<data_root>/annotations.json`
    /// is used when unset and present.
    pub annotations: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let spec = SynthSpec::default();
        Self { per_class: spec.per_class, size: spec.size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub resamples: usize,
    pub level: f64,
    /// Split evaluated by `eval`.
    pub split: Split,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { resamples: DEFAULT_RESAMPLES, level: DEFAULT_LEVEL, split: Split::Test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    /// Epochs per fold; `train.epochs` when unset.
    pub epochs: Option<usize>,
    pub augment: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, epochs: None, augment: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub split: Split,
    /// Number of images explained; lesioned images come first when
    /// annotations are available.
    pub count: usize,
    /// Block whose output tokens form the feature map; last when unset.
    pub target_block: Option<usize>,
    /// Explain the true class instead of the predicted one.
    pub use_label: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { split: Split::Test, count: 8, target_block: None, use_label: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 32, warmup: 2, repeats: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessParams,
    pub split: SplitRatios,
    pub augment: AugmentationSpec,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub cv: CvConfig,
    pub explain: ExplainConfig,
    pub bench: BenchConfig,
}

fn scoped(prefix: &str, result: Result<()>) -> Result<()> {
    result.map_err(|e| match e {
        Error::Config { field, message } if field != prefix && !field.starts_with(&format!("{prefix}.")) => {
            Error::Config { field: format!("{prefix}.{field}"), message }
        }
        other => other,
    })
}

impl RunConfig {
    /// Desk-scale preset: 64x64 inputs, patch 8, width 64, two blocks plus
    /// the extra one, four heads.
    pub fn desk() -> Self {
        Self {
            seed: 42,
            preprocess: PreprocessParams {
                size: 64,
                clahe: ClaheParams { tiles_x: 4, tiles_y: 4, ..ClaheParams::default() },
                ..PreprocessParams::default()
            },
            model: ViTConfig::desk(),
            train: TrainConfig { epochs: 6, learning_rate: 3e-4, ..TrainConfig::default() },
            cv: CvConfig { epochs: Some(4), ..CvConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        scoped("preprocess", self.preprocess.validate())?;
        scoped("split", self.split.validate())?;
        scoped("augment", self.augment.validate())?;
        scoped("model", self.model.validate())?;
        scoped("train", self.train.validate())?;
        scoped("synth", SynthSpec { per_class: self.synth.per_class, size: self.synth.size, seed: self.seed }.validate())?;
        if self.preprocess.size != self.model.image_size {
            return Err(Error::config(
                "model.image_size",
                format!("{} differs from preprocess.size {}", self.model.image_size, self.preprocess.size),
            ));
        }
        if self.metrics.resamples == 0 {
            return Err(Error::config("metrics.resamples", "must be at least 1"));
        }
        if !(self.metrics.level > 0.0 && self.metrics.level < 1.0) {
            return Err(Error::config("metrics.level", format!("{} outside (0, 1)", self.metrics.level)));
        }
        if self.cv.folds < 2 {
            return Err(Error::config("cv.folds", format!("need at least 2 folds, got {}", self.cv.folds)));
        }
        if self.cv.epochs == Some(0) {
            return Err(Error::config("cv.epochs", "must be at least 1"));
        }
        if let Some(b) = self.explain.target_block {
            if b >= self.model.num_blocks() {
                return Err(Error::config(
                    "explain.target_block",
                    format!("block {b} out of range for {} blocks", self.model.num_blocks()),
                ));
            }
        }
        if self.bench.batch == 0 || self.bench.repeats == 0 {
            return Err(Error::config("bench", "batch and repeats must be at least 1"));
        }
        Ok(())
    }

    /// Builds the configuration from defaults, an optional JSON file and
    /// `key=value` overrides, in that order, then validates it.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            merge(&mut tree, &patch, "")?;
        }
        for item in overrides {
            let (key, raw) =
                item.split_once('=').ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(tree).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `patch` on `base`; every key of `patch` must already exist.
fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let field = join(prefix, k);
                let slot = b.get_mut(k).ok_or_else(|| Error::config(field.clone(), "unknown key"))?;
                merge(slot, v, &field)?;
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value.clone();
            Ok(())
        }
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let mut walked = String::new();
    for part in key.split('.') {
        walked = join(&walked, part);
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::config(walked.clone(), "unknown key"))?;
    }
    *node = value;
    Ok(())
}

//! Class-per-directory datasets and the manifest that carries sample
//! records between pipeline stages.

mod augment;
mod ingest;
mod split;

pub use augment::{apply_augmentation, augment_training_set, AugmentationSpec, AUGMENTED_COPIES};
pub use ingest::{ingest, preprocess_dataset, Ingested};
pub use split::{make_kfolds, stratified_split, SplitRatios};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageproc::{read_image, ImageU8};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Origin {
    Original,
    Augmented {
        /// Path of the original record this copy was derived from.
        parent: String,
        /// Seed of the augmentation draw.
        seed: u64,
        copy: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub class_id: usize,
    pub class_name: String,
    pub split: Option<Split>,
    /// Fold in which this record is held out, for cross-validation manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub origin: Origin,
}

impl SampleRecord {
    pub fn is_original(&self) -> bool {
        self.origin == Origin::Original
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Directory record paths are resolved against. Not part of the hash.
    pub root: String,
    /// Class names indexed by class id, sorted lexicographically.
    pub labels: Vec<String>,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
    pub content_hash: String,
}

#[derive(Serialize)]
struct HashedContent<'a> {
    labels: &'a [String],
    seed: u64,
    records: &'a [SampleRecord],
}

impl DatasetManifest {
    pub fn new(root: impl Into<String>, labels: Vec<String>, seed: u64, records: Vec<SampleRecord>) -> Self {
        let mut m = Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            root: root.into(),
            labels,
            seed,
            records,
            content_hash: String::new(),
        };
        m.refresh_hash();
        m
    }

    /// SHA-256 over the label table, seed and records.
    pub fn compute_hash(&self) -> String {
        let content = HashedContent { labels: &self.labels, seed: self.seed, records: &self.records };
        let bytes = serde_json::to_vec(&content).expect("manifest content serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn refresh_hash(&mut self) {
        self.content_hash = self.compute_hash();
    }

    /// Copy of this manifest restricted to the records accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&SampleRecord) -> bool) -> Self {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::new(self.root.clone(), self.labels.clone(), self.seed, records)
    }

    pub fn split(&self, split: Split) -> Self {
        self.filtered(|r| r.split == Some(split))
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        Path::new(&self.root).join(&record.path)
    }

    pub fn load_image(&self, record: &SampleRecord) -> Result<ImageU8> {
        read_image(&self.resolve(record))
    }

    /// Record counts per `(split, class_id)`.
    pub fn counts(&self) -> BTreeMap<(Option<Split>, usize), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.split, r.class_id)).or_default() += 1;
        }
        out
    }

    pub fn count(&self, split: Option<Split>, class_id: Option<usize>) -> usize {
        self.records
            .iter()
            .filter(|r| split.is_none() || r.split == split)
            .filter(|r| class_id.is_none_or(|c| r.class_id == c))
            .count()
    }

    /// Structural invariants: unique paths, consistent labels, augmented
    /// records only in train with an original train parent.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Contract(format!("duplicate record path {}", r.path)));
            }
            if self.labels.get(r.class_id) != Some(&r.class_name) {
                return Err(Error::Contract(format!(
                    "record {} has class {}:{} inconsistent with the label table",
                    r.path, r.class_id, r.class_name
                )));
            }
        }
        for r in &self.records {
            if let Origin::Augmented { parent, .. } = &r.origin {
                if r.split != Some(Split::Train) {
                    return Err(Error::Contract(format!("augmented record {} is outside train", r.path)));
                }
                let ok = self
                    .records
                    .iter()
                    .any(|p| &p.path == parent && p.is_original() && p.split == Some(Split::Train));
                if !ok {
                    return Err(Error::Contract(format!("augmented record {} has no original train parent", r.path)));
                }
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus: every class present in every split.
    pub fn validate_splits(&self) -> Result<()> {
        self.validate()?;
        for split in Split::ALL {
            for (id, name) in self.labels.iter().enumerate() {
                if self.count(Some(split), Some(id)) == 0 {
                    return Err(Error::Contract(format!("class {name} has no {} records", split.as_str())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and checks its content hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest {} has schema version {}, expected {MANIFEST_SCHEMA_VERSION}",
                path.display(),
                m.schema_version
            )));
        }
        if m.compute_hash() != m.content_hash {
            return Err(Error::Format(format!("manifest {} content hash mismatch", path.display())));
        }
        Ok(m)
    }
}

/// `/`-joined relative path for a record.
pub(crate) fn rel_path(parts: &[&str]) -> String {
    parts.join("/")
}

/// File name stem, with a non-PNG extension folded in so that `a.png` and
/// `a.ppm` in the same class map to different derived files.
pub(crate) fn derived_stem(path: &str) -> String {
    let name = path.rsplit('/').next().unwrap_or(path);
    match name.rsplit_once('.') {
        Some((stem, ext)) if ext.eq_ignore_ascii_case("png") => stem.to_string(),
        Some((stem, ext)) => format!("{stem}_{}", ext.to_ascii_lowercase()),
        None => name.to_string(),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// In-memory manifest with `per_class` originals for each of `classes`.
    pub fn synthetic_manifest(classes: &[&str], per_class: usize) -> DatasetManifest {
        let labels: Vec<String> = classes.iter().map(|s| s.to_string()).collect();
        let records = labels
            .iter()
            .enumerate()
            .flat_map(|(id, name)| {
                (0..per_class).map(move |i| SampleRecord {
                    path: format!("{name}/img_{i:04}.png"),
                    class_id: id,
                    class_name: name.clone(),
                    split: None,
                    fold: None,
                    origin: Origin::Original,
                })
            })
            .collect();
        DatasetManifest::new("data", labels, 0, records)
    }
}

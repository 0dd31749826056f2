use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.75, val: 0.10, test: 0.15 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("split.{name}"), format!("ratio {v} outside [0, 1]")));
            }
        }
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("ratios sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Per-class `(train, val, test)` counts: val and test are rounded to
    /// the nearest integer and the remainder goes to train, so every count
    /// is within one sample of its ratio.
    pub fn allocate(&self, n: usize) -> (usize, usize, usize) {
        let round = |r: f64| ((n as f64) * r).round() as usize;
        let val = round(self.val).min(n);
        let test = round(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

/// Indices of original records grouped by class, each group sorted by path
/// and shuffled with a stream keyed by `(seed, stream_tag, class_id)`.
fn shuffled_by_class(manifest: &DatasetManifest, seed: u64, stream_tag: u64) -> Vec<Vec<usize>> {
    (0..manifest.num_classes())
        .map(|class_id| {
            let mut idx: Vec<usize> = (0..manifest.records.len())
                .filter(|&i| manifest.records[i].class_id == class_id && manifest.records[i].is_original())
                .collect();
            idx.sort_by(|&a, &b| manifest.records[a].path.cmp(&manifest.records[b].path));
            idx.shuffle(&mut seed::rng(seed, &[stream_tag, class_id as u64]));
            idx
        })
        .collect()
}

/// Stratified train/val/test assignment of original records.
pub fn stratified_split(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    if manifest.records.iter().any(|r| !r.is_original()) {
        return Err(Error::Contract("stratified_split expects a manifest of original records only".into()));
    }
    let mut records = manifest.records.clone();
    for (class_id, idx) in shuffled_by_class(manifest, seed, tag::SPLIT).into_iter().enumerate() {
        let (n_train, n_val, n_test) = ratios.allocate(idx.len());
        for (name, want, count) in [("train", ratios.train, n_train), ("val", ratios.val, n_val), ("test", ratios.test, n_test)] {
            if want > 0.0 && count == 0 {
                return Err(Error::Contract(format!(
                    "class {} has {} records, too few for a non-empty {name} split",
                    manifest.labels[class_id],
                    idx.len()
                )));
            }
        }
        for (pos, &i) in idx.iter().enumerate() {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            records[i].split = Some(split);
            records[i].fold = None;
        }
    }
    Ok(DatasetManifest::new(manifest.root.clone(), manifest.labels.clone(), seed, records))
}

/// Stratified k-fold partition of the original records.
///
/// Within each class, records are shuffled and dealt round-robin to folds.
/// Element `f` of the result is `(train, test)` where `test` holds fold
/// `f`. Each record's `fold` field names the fold that holds it out.
pub fn make_kfolds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k >= 2, got {k}")));
    }
    let groups = shuffled_by_class(manifest, seed, tag::KFOLD);
    let mut fold_of = vec![None; manifest.records.len()];
    for (class_id, idx) in groups.iter().enumerate() {
        if idx.len() < k {
            return Err(Error::Contract(format!(
                "class {} has {} records, fewer than k = {k}",
                manifest.labels[class_id],
                idx.len()
            )));
        }
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = Some(pos % k);
        }
    }
    let assigned: Vec<(usize, &SampleRecord)> =
        fold_of.iter().zip(&manifest.records).filter_map(|(f, r)| f.map(|f| (f, r))).collect();

    Ok((0..k)
        .map(|fold| {
            let pick = |held_out: bool| {
                let records = assigned
                    .iter()
                    .filter(|(f, _)| (*f == fold) == held_out)
                    .map(|&(f, r)| SampleRecord {
                        split: Some(if held_out { Split::Test } else { Split::Train }),
                        fold: Some(f),
                        ..r.clone()
                    })
                    .collect();
                DatasetManifest::new(manifest.root.clone(), manifest.labels.clone(), seed, records)
            };
            (pick(false), pick(true))
        })
        .collect())
}

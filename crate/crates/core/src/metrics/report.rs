use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{accuracy, mcc_multiclass, ConfidenceInterval, ConfusionMatrix};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A published accuracy figure together with the test-set size it refers to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceClaim {
    pub accuracy: f64,
    pub test_samples: u64,
}

impl ReferenceClaim {
    /// Headline test accuracy reported for the three-class potato leaf
    /// task, on a 225-image test split.
    pub const POTATO_LEAF: ReferenceClaim = ReferenceClaim { accuracy: 0.9985, test_samples: 225 };

    /// Correct-count fractions of `test_samples` closest to the claimed
    /// accuracy, below and above it (equal when one matches exactly).
    pub fn nearest_fractions(&self) -> (u64, u64) {
        let exact = self.accuracy * self.test_samples as f64;
        (exact.floor() as u64, (exact.ceil() as u64).min(self.test_samples))
    }

    /// Whether some count out of `test_samples` rounds to the claimed
    /// accuracy at the precision it was stated with.
    pub fn is_attainable(&self, decimals: i32) -> bool {
        let scale = 10f64.powi(decimals);
        let target = (self.accuracy * scale).round();
        (0..=self.test_samples).any(|c| (c as f64 / self.test_samples as f64 * scale).round() == target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub samples: u64,
    pub accuracy: f64,
    pub mcc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub ci: Vec<ConfidenceInterval>,
    /// Phase name to seconds.
    pub timings: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(cm: ConfusionMatrix, labels: &[String]) -> Result<Self> {
        if labels.len() != cm.k() {
            return Err(Error::Dimension(format!("{} class names for a {}-class matrix", labels.len(), cm.k())));
        }
        let (precision, recall, support) = (cm.precision(), cm.recall(), cm.row_sums());
        let per_class = labels
            .iter()
            .enumerate()
            .map(|(i, name)| ClassMetrics { name: name.clone(), support: support[i], precision: precision[i], recall: recall[i] })
            .collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            samples: cm.total(),
            accuracy: accuracy(&cm)?,
            mcc: mcc_multiclass(&cm),
            per_class,
            confusion: cm,
            ci: Vec::new(),
            timings: BTreeMap::new(),
            notes: Vec::new(),
        })
    }

    /// Adds a note for every way this evaluation disagrees with `claim`.
    pub fn check_reference(&mut self, claim: &ReferenceClaim) {
        let (trace, total) = (self.confusion.trace(), self.samples);
        if total != claim.test_samples {
            self.notes.push(format!(
                "evaluated {total} samples, but the reference accuracy refers to a {}-sample test split",
                claim.test_samples
            ));
        }
        if (self.accuracy - claim.accuracy).abs() > 0.5 / total as f64 {
            self.notes.push(format!(
                "accuracy {trace}/{total} = {:.5} is inconsistent with the reference accuracy {}",
                self.accuracy, claim.accuracy
            ));
        }
        if !claim.is_attainable(4) {
            let (lo, hi) = claim.nearest_fractions();
            let n = claim.test_samples;
            self.notes.push(format!(
                "the reference accuracy {} is not attainable on {n} samples: nearest are {lo}/{n} = {:.5} and {hi}/{n} = {:.5}",
                claim.accuracy,
                lo as f64 / n as f64,
                hi as f64 / n as f64
            ));
        }
    }

    /// Copy with timing values cleared, for comparing reports across runs.
    pub fn without_timings(&self) -> Self {
        Self { timings: BTreeMap::new(), ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

//! Confusion matrices, accuracy, multiclass MCC, bootstrap intervals,
//! evaluation reports, cross-validation and timing.

mod bootstrap;
mod cv;
mod report;
mod timing;

pub use bootstrap::{bootstrap_ci, percentile, ConfidenceInterval, Statistic, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
pub use cv::{run_cross_validation, CVReport, FoldOutcome, FoldRunner, ViTFoldRunner};
pub use report::{EvalReport, ReferenceClaim, REPORT_SCHEMA_VERSION};
pub use timing::{benchmark, measure_phase, BenchStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { k, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|row| row.len() != k) {
            return Err(Error::Dimension(format!("confusion matrix rows must all have length {k}")));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    /// Samples per true class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Samples per predicted class.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Per-class precision; `None` where nothing was predicted as that class.
    pub fn precision(&self) -> Vec<Option<f64>> {
        self.col_sums().iter().enumerate().map(|(i, &c)| (c > 0).then(|| self.counts[i][i] as f64 / c as f64)).collect()
    }

    /// Per-class recall; `None` for classes absent from the labels.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.row_sums().iter().enumerate().map(|(i, &r)| (r > 0).then(|| self.counts[i][i] as f64 / r as f64)).collect()
    }

    /// Rows are true classes, columns predicted classes, with a header row.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("true\\predicted");
        for j in 0..self.k {
            out.push(',');
            out.push_str(&name(j));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&name(i));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(labels: &[usize], predictions: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Dimension(format!("{} labels but {} predictions", labels.len(), predictions.len())));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= k || p >= k {
            return Err(Error::Index(format!("class {} out of range for {k} classes", t.max(p))));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Trace over total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::Contract("accuracy of an empty confusion matrix".into())),
        total => Ok(cm.trace() as f64 / total as f64),
    }
}

/// Multiclass Matthews correlation (the Rk statistic):
/// `(c s - sum p_k t_k) / (sqrt(s^2 - sum p_k^2) sqrt(s^2 - sum t_k^2))`
/// with `c` the trace, `s` the total, `p` and `t` the predicted and true
/// class totals. A zero denominator gives 0.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let p: Vec<f64> = cm.col_sums().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = cm.row_sums().iter().map(|&v| v as f64).collect();
    let num = c * s - p.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
    let dp = s * s - p.iter().map(|v| v * v).sum::<f64>();
    let dt = s * s - t.iter().map(|v| v * v).sum::<f64>();
    let den = (dp * dt).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (num / den).clamp(-1.0, 1.0)
    }
}

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, confusion_matrix, mcc_multiclass};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Accuracy,
    Mcc,
}

impl Statistic {
    fn eval(self, labels: &[usize], predictions: &[usize], k: usize) -> Result<f64> {
        let cm = confusion_matrix(labels, predictions, k)?;
        match self {
            Statistic::Accuracy => accuracy(&cm),
            Statistic::Mcc => Ok(mcc_multiclass(&cm)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub method: String,
    pub statistic: Statistic,
    pub resamples: usize,
    pub seed: u64,
}

/// Quantile `q` of sorted values with linear interpolation between
/// order statistics at position `q * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of no values");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Percentile bootstrap interval of `statistic` over samples resampled
/// with replacement.
///
/// Resample `i` draws its indices from a stream keyed by `(seed, i)`, so
/// the result does not depend on how resamples are scheduled.
pub fn bootstrap_ci(
    labels: &[usize],
    predictions: &[usize],
    k: usize,
    statistic: Statistic,
    resamples: usize,
    level: f64,
    seed_value: u64,
) -> Result<ConfidenceInterval> {
    if labels.is_empty() {
        return Err(Error::Contract("bootstrap of an empty sample".into()));
    }
    if labels.len() != predictions.len() {
        return Err(Error::Dimension(format!("{} labels but {} predictions", labels.len(), predictions.len())));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("need resamples >= 1 and level in (0, 1), got {resamples}, {level}")));
    }
    statistic.eval(labels, predictions, k)?;
    let n = labels.len();
    let mut stats = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed_value, &[tag::BOOTSTRAP, i as u64]);
            let (mut l, mut p) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let j = rng.random_range(0..n);
                l.push(labels[j]);
                p.push(predictions[j]);
            }
            statistic.eval(&l, &p, k)
        })
        .collect::<Result<Vec<f64>>>()?;
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        low: percentile(&stats, tail),
        high: percentile(&stats, 1.0 - tail),
        level,
        method: "percentile".into(),
        statistic,
        resamples,
        seed: seed_value,
    })
}

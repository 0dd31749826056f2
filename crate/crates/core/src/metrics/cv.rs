use serde::{Deserialize, Serialize};

use super::{accuracy, confusion_matrix, mcc_multiclass, ConfusionMatrix};
use crate::dataset::{augment_training_set, make_kfolds, AugmentationSpec, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{build_model, ViTConfig};
use crate::seed::{self, tag};
use crate::train::{evaluate, train, LabeledImages, TrainConfig, TrainLog};

/// Labels and predictions on one held-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Trains on one fold's training records and predicts its test records.
pub trait FoldRunner {
    fn run_fold(
        &mut self,
        fold: usize,
        train_set: &DatasetManifest,
        test_set: &DatasetManifest,
        fold_seed: u64,
    ) -> Result<FoldOutcome>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub schema_version: u32,
    pub k: usize,
    pub seed: u64,
    pub fold_accuracies: Vec<f64>,
    pub fold_mcc: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of the fold accuracies.
    pub std: f64,
    /// Confusion matrix summed over all folds.
    pub pooled: ConfusionMatrix,
}

impl CVReport {
    pub fn from_outcomes(outcomes: &[FoldOutcome], num_classes: usize, seed_value: u64) -> Result<Self> {
        let mut pooled = ConfusionMatrix::zeros(num_classes);
        let mut fold_accuracies = Vec::new();
        let mut fold_mcc = Vec::new();
        for o in outcomes {
            let cm = confusion_matrix(&o.labels, &o.predictions, num_classes)?;
            fold_accuracies.push(accuracy(&cm)?);
            fold_mcc.push(mcc_multiclass(&cm));
            let counts = cm.counts().iter().flatten();
            let merged: Vec<u64> = pooled.counts().iter().flatten().zip(counts).map(|(a, b)| a + b).collect();
            pooled = ConfusionMatrix::from_counts(merged.chunks(num_classes).map(<[u64]>::to_vec).collect())?;
        }
        let k = fold_accuracies.len();
        if k == 0 {
            return Err(Error::Contract("cross-validation produced no folds".into()));
        }
        let mean = fold_accuracies.iter().sum::<f64>() / k as f64;
        let std = if k > 1 {
            (fold_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { schema_version: super::REPORT_SCHEMA_VERSION, k, seed: seed_value, fold_accuracies, fold_mcc, mean, std, pooled })
    }
}

/// Stratified k-fold cross-validation: each fold is held out once while
/// `runner` trains on the rest. Fold `f` runs with seed
/// `derive(seed, [FOLD_RUN, f])`.
pub fn run_cross_validation(
    manifest: &DatasetManifest,
    k: usize,
    seed_value: u64,
    runner: &mut dyn FoldRunner,
) -> Result<CVReport> {
    let folds = make_kfolds(manifest, k, seed_value)?;
    let mut outcomes = Vec::with_capacity(k);
    for (fold, (train_set, test_set)) in folds.iter().enumerate() {
        let fold_seed = seed::derive(seed_value, &[tag::FOLD_RUN, fold as u64]);
        let outcome = runner.run_fold(fold, train_set, test_set, fold_seed)?;
        if outcome.labels.len() != test_set.records.len() {
            return Err(Error::Contract(format!(
                "fold {fold}: runner returned {} outcomes for {} test records",
                outcome.labels.len(),
                test_set.records.len()
            )));
        }
        log::info!("fold {fold}: accuracy {:.4}", outcome.labels.iter().zip(&outcome.predictions).filter(|(a, b)| a == b).count() as f64 / outcome.labels.len() as f64);
        outcomes.push(outcome);
    }
    CVReport::from_outcomes(&outcomes, manifest.num_classes(), seed_value)
}

/// Fold runner that augments the fold's training records (when `augment`
/// is set), trains a fresh model and evaluates it on the held-out fold.
///
/// Augmented images of fold `f` go to `<root>/<subdir>/fold<f>/`.
pub struct ViTFoldRunner {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub augment: Option<AugmentationSpec>,
    pub subdir: String,
    /// Training log of every completed fold.
    pub logs: Vec<TrainLog>,
}

impl ViTFoldRunner {
    pub fn new(model: ViTConfig, train: TrainConfig, augment: Option<AugmentationSpec>, subdir: impl Into<String>) -> Self {
        Self { model, train, augment, subdir: subdir.into(), logs: Vec::new() }
    }
}

impl FoldRunner for ViTFoldRunner {
    fn run_fold(
        &mut self,
        fold: usize,
        train_set: &DatasetManifest,
        test_set: &DatasetManifest,
        fold_seed: u64,
    ) -> Result<FoldOutcome> {
        let train_manifest = match &self.augment {
            Some(spec) => augment_training_set(train_set, spec, fold_seed, &format!("{}/fold{fold}", self.subdir))?,
            None => train_set.clone(),
        };
        let params = build_model(&self.model, seed::derive(fold_seed, &[tag::INIT]))?;
        let cfg = TrainConfig { seed: fold_seed, ..self.train.clone() };
        let (params, log) = train(params, &LabeledImages::from_manifest(&train_manifest)?, None, &cfg)?;
        self.logs.push(log);
        let test = LabeledImages::from_manifest(test_set)?;
        let eval = evaluate(&params, &test, cfg.eval_batch_size)?;
        Ok(FoldOutcome { labels: eval.labels, predictions: eval.predictions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testutil::synthetic_manifest;

    /// Looks the label up from the record itself.
    struct Memorizer;

    impl FoldRunner for Memorizer {
        fn run_fold(&mut self, _: usize, train_set: &DatasetManifest, test_set: &DatasetManifest, _: u64) -> Result<FoldOutcome> {
            assert!(test_set.records.iter().all(|t| train_set.records.iter().all(|r| r.path != t.path)));
            let labels: Vec<usize> = test_set.records.iter().map(|r| r.class_id).collect();
            Ok(FoldOutcome { predictions: labels.clone(), labels })
        }
    }

    /// Always predicts class 0.
    struct Constant(Vec<u64>);

    impl FoldRunner for Constant {
        fn run_fold(&mut self, _: usize, _: &DatasetManifest, test_set: &DatasetManifest, fold_seed: u64) -> Result<FoldOutcome> {
            self.0.push(fold_seed);
            let labels: Vec<usize> = test_set.records.iter().map(|r| r.class_id).collect();
            Ok(FoldOutcome { predictions: vec![0; labels.len()], labels })
        }
    }

    #[test]
    fn memorizer_scores_one() {
        let m = synthetic_manifest(&["a", "b", "c"], 20);
        let r = run_cross_validation(&m, 5, 1, &mut Memorizer).unwrap();
        assert_eq!(r.fold_accuracies, vec![1.0; 5]);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.pooled.total(), 60);
    }

    #[test]
    fn constant_predictor_and_seeds() {
        let m = synthetic_manifest(&["a", "b", "c"], 10);
        let mut runner = Constant(Vec::new());
        let r = run_cross_validation(&m, 5, 2, &mut runner).unwrap();
        assert_eq!(r.k, 5);
        for a in &r.fold_accuracies {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((r.mean - r.fold_accuracies.iter().sum::<f64>() / 5.0).abs() < 1e-12);
        assert_eq!(r.fold_mcc, vec![0.0; 5]);
        let unique: std::collections::HashSet<_> = runner.0.iter().collect();
        assert_eq!(unique.len(), 5);
    }

    #[test]
    fn mean_is_exact_mean() {
        let outcomes: Vec<FoldOutcome> = [vec![0, 1, 1], vec![1, 1, 1], vec![1, 0, 0]]
            .into_iter()
            .map(|p| FoldOutcome { labels: vec![0, 1, 1], predictions: p })
            .collect();
        let r = CVReport::from_outcomes(&outcomes, 2, 0).unwrap();
        let expect = (1.0 + 2.0 / 3.0 + 0.0) / 3.0;
        assert!((r.mean - expect).abs() < 1e-12);
        let var = ((1.0 - expect).powi(2) + (2.0 / 3.0 - expect).powi(2) + expect.powi(2)) / 2.0;
        assert!((r.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(r.pooled.trace(), 5);
    }
}

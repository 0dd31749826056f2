//! Mini-batch AdamW training with per-epoch validation and best-checkpoint
//! selection.

mod data;
mod optim;

pub use data::LabeledImages;
pub use optim::{AdamSettings, AdamW, CosineSchedule};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{bind, ModelParams};
use crate::seed::{self, tag};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam: AdamSettings,
    /// Fraction of all optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
    /// Skip the final incomplete batch of each epoch.
    pub drop_last: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-4,
            weight_decay: 0.05,
            adam: AdamSettings::default(),
            warmup_frac: 0.05,
            seed: 0,
            drop_last: false,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("train.warmup_frac", "must lie in [0, 1)"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned, when a validation set was used.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{},{:.3}",
                e.epoch,
                e.train_loss,
                e.train_acc,
                opt(e.val_loss),
                opt(e.val_acc),
                e.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Anything that maps a `[batch, H, W, 3]` image tensor to logits.
pub trait Classifier {
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for ModelParams {
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    /// Argmax class per sample, ties resolved to the lowest index.
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Total cross-entropy of `[b, k]` logits against `labels`.
fn summed_loss(logits: &[f32], labels: &[usize], k: usize) -> f64 {
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            lse - row[y] as f64
        })
        .sum()
}

pub fn evaluate(model: &impl Classifier, data: &LabeledImages, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    let batch_size = batch_size.max(1);
    let k = data.num_classes();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for chunk in indices.chunks(batch_size) {
        let logits = model.logits(&data.batch(chunk))?;
        if logits.shape() != [chunk.len(), k] {
            return Err(Error::Dimension(format!("expected logits [{}, {k}], got {:?}", chunk.len(), logits.shape())));
        }
        loss += summed_loss(logits.data(), &data.batch_labels(chunk), k);
        predictions.extend(logits.data().chunks(k).map(argmax));
    }
    let correct = predictions.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        labels: data.labels().to_vec(),
    })
}

fn check_dims(params: &ModelParams, data: &LabeledImages, role: &str) -> Result<()> {
    let size = params.config().image_size;
    if !data.is_empty() && (data.height(), data.width()) != (size, size) {
        return Err(Error::Dimension(format!(
            "{role} images are {}x{}, the model expects {size}x{size}",
            data.height(),
            data.width()
        )));
    }
    if data.num_classes() != params.config().num_classes {
        return Err(Error::Contract(format!(
            "{role} set has {} classes, the model has {}",
            data.num_classes(),
            params.config().num_classes
        )));
    }
    Ok(())
}

/// Epoch order of sample indices: a permutation keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed_value: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed_value, &[tag::SHUFFLE, epoch as u64]));
    order
}

/// Trains `params` and returns the parameters of the epoch with the best
/// validation accuracy (ties go to the later epoch), or the final
/// parameters when no validation set is given.
pub fn train(
    mut params: ModelParams,
    train_set: &LabeledImages,
    val_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    check_dims(&params, train_set, "train")?;
    if let Some(v) = val_set {
        check_dims(&params, v, "validation")?;
    }
    let n = train_set.len();
    let per_epoch = if cfg.drop_last { n / cfg.batch_size } else { n.div_ceil(cfg.batch_size) };
    if per_epoch == 0 {
        return Err(Error::Contract(format!("drop_last leaves no batch: {n} samples, batch size {}", cfg.batch_size)));
    }
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.epochs * per_epoch, cfg.warmup_frac);
    let mut opt = AdamW::new(&params, cfg.adam.clone(), cfg.weight_decay);
    let k = params.config().num_classes;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(n, cfg.seed, epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).take(per_epoch).enumerate() {
            let labels = train_set.batch_labels(idx);
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, true);
            let mut drop_rng = seed::rng(cfg.seed, &[tag::DROPOUT, epoch as u64, b as u64]);
            let trace = bound.forward(&mut tape, &train_set.batch(idx), Some(&mut drop_rng))?;
            let loss = tape.cross_entropy(trace.logits, &labels)?;
            tape.backward(loss)?;

            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Contract(format!("training diverged: loss {value} at epoch {epoch}, batch {b}")));
            }
            loss_sum += value * idx.len() as f64;
            let logits = tape.value(trace.logits).data();
            correct += logits.chunks(k).zip(&labels).filter(|(row, &y)| argmax(row) == y).count();
            seen += idx.len();

            let grads: Vec<&[f32]> = bound
                .vars()
                .iter()
                .map(|&v| tape.grad(v).ok_or_else(|| Error::Contract("a parameter received no gradient".into())))
                .collect::<Result<_>>()?;
            opt.step(&mut params, &grads, schedule.lr(epoch * per_epoch + b));
        }

        let val = val_set.map(|v| evaluate(&params, v, cfg.eval_batch_size)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.as_ref().map(|e| e.loss),
            val_acc: val.as_ref().map(|e| e.accuracy),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}{}",
            record.train_loss,
            record.train_acc,
            val.as_ref().map(|e| format!(", val loss {:.4} acc {:.4}", e.loss, e.accuracy)).unwrap_or_default()
        );
        if let Some(v) = &val {
            if best.as_ref().is_none_or(|(acc, _)| v.accuracy >= *acc) {
                best = Some((v.accuracy, params.clone()));
                log.best_epoch = Some(epoch);
            }
        }
        log.epochs.push(record);
    }
    let out = best.map(|(_, p)| p).unwrap_or(params);
    Ok((out, log))
}

/// [`train`] on images loaded from manifests.
pub fn train_from_manifests(
    params: ModelParams,
    train_manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    let train_set = LabeledImages::from_manifest(train_manifest)?;
    let val_set = val_manifest.map(LabeledImages::from_manifest).transpose()?;
    train(params, &train_set, val_set.as_ref(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::ImageU8;
    use crate::model::{build_model, ViTConfig};
    use rand::Rng;

    /// Three classes with distinct mean color plus noise.
    fn color_set(per_class: usize, size: usize, seed_value: u64) -> LabeledImages {
        let mut rng = seed::rng(seed_value, &[]);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * 3 {
            let class = i % 3;
            let data = (0..size * size * 3)
                .map(|j| {
                    let base = if j % 3 == class { 170.0 } else { 60.0 };
                    (base + rng.random::<f64>() * 60.0 - 30.0) as u8
                })
                .collect();
            images.push(ImageU8::new(size, size, 3, data).unwrap());
            labels.push(class);
        }
        LabeledImages::new(&images, labels, 3).unwrap()
    }

    #[test]
    fn initial_loss_is_near_ln3() {
        let params = build_model(&ViTConfig::desk(), 0).unwrap();
        let data = color_set(10, 64, 1);
        let e = evaluate(&params, &data, 16).unwrap();
        assert!((e.loss - 3f64.ln()).abs() < 0.1, "{}", e.loss);
        assert_eq!(e.predictions.len(), 30);
    }

    struct Oracle;

    impl Classifier for Oracle {
        fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
            // the label is the brightest channel of the first pixel
            let per = images.numel() / images.shape()[0];
            let b = images.shape()[0];
            let mut out = vec![0.0; b * 3];
            for i in 0..b {
                let px = &images.data()[i * per..i * per + 3];
                let c = argmax(px);
                out[i * 3 + c] = 10.0;
            }
            Tensor::new(vec![b, 3], out)
        }
    }

    #[test]
    fn oracle_scores_one_and_empty_set_errors() {
        let data = color_set(4, 4, 2);
        let clean: Vec<ImageU8> = (0..data.len())
            .map(|i| {
                let c = data.labels()[i];
                let px: Vec<u8> = (0..48).map(|j| if j % 3 == c { 200 } else { 10 }).collect();
                ImageU8::new(4, 4, 3, px).unwrap()
            })
            .collect();
        let data = LabeledImages::new(&clean, data.labels().to_vec(), 3).unwrap();
        let e = evaluate(&Oracle, &data, 5).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.predictions, data.labels());
        let empty = LabeledImages::new(&[], vec![], 3).unwrap();
        assert!(matches!(evaluate(&Oracle, &empty, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        for epoch in 0..5 {
            let mut o = epoch_order(37, 9, epoch);
            assert_ne!(o, epoch_order(37, 9, epoch + 1));
            o.sort_unstable();
            assert_eq!(o, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_train_set_is_contract_error() {
        let params = build_model(&ViTConfig::tiny(), 0).unwrap();
        let empty = LabeledImages::new(&[], vec![], 3).unwrap();
        assert!(matches!(train(params, &empty, None, &TrainConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let params = build_model(&ViTConfig::tiny(), 0).unwrap();
        let data = color_set(2, 16, 0);
        assert!(matches!(train(params, &data, None, &TrainConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            epochs: vec![EpochRecord { epoch: 0, train_loss: 1.0, train_acc: 0.5, val_loss: None, val_acc: None, seconds: 0.25 }],
            best_epoch: None,
        };
        assert_eq!(log.to_csv(), "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n0,1.000000,0.500000,,,0.250\n");
    }

    #[test]
    fn short_run_learns_and_is_deterministic() {
        let c = ViTConfig { image_size: 16, patch_size: 4, embed_dim: 16, depth: 1, heads: 2, ..ViTConfig::default() };
        let data = color_set(8, 16, 3);
        let cfg = TrainConfig { epochs: 15, batch_size: 8, learning_rate: 3e-3, seed: 4, ..TrainConfig::default() };
        let run = || train(build_model(&c, 1).unwrap(), &data, Some(&data), &cfg).unwrap();
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(log.epochs.len(), 15);
        assert!(log.epochs.last().unwrap().train_loss < log.epochs[0].train_loss);
        assert!(evaluate(&a, &data, 7).unwrap().accuracy > 0.9);
        let best = log.best_epoch.unwrap();
        let best_acc = log.epochs[best].val_acc.unwrap();
        assert!(log.epochs.iter().all(|e| e.val_acc.unwrap() <= best_acc));
        assert!(log.epochs[best + 1..].iter().all(|e| e.val_acc.unwrap() < best_acc));
    }
}

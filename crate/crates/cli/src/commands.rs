//! One function per pipeline stage. Each reads its inputs, writes its
//! artifacts plus a resolved-config snapshot into its output directory and
//! returns a JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use tinyvit_core::dataset::{augment_training_set, ingest, preprocess_dataset, stratified_split, DatasetManifest, Split};
use tinyvit_core::gradcam::{compute_gradcam, render_overlay};
use tinyvit_core::imageproc::{normalize01, write_image};
use tinyvit_core::metrics::{
    benchmark, bootstrap_ci, confusion_matrix, measure_phase, run_cross_validation, BenchStats, EvalReport,
    ReferenceClaim, Statistic, ViTFoldRunner,
};
use tinyvit_core::model::{build_model, load_checkpoint, parameter_count, save_checkpoint, ModelParams, ViTConfig};
use tinyvit_core::seed;
use tinyvit_core::synth::{generate_synthetic, SynthAnnotations, SynthSpec, ANNOTATIONS_FILE};
use tinyvit_core::tensor::Tensor;
use tinyvit_core::train::{evaluate, train, LabeledImages, TrainConfig};
use tinyvit_core::{Error, Result};

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.tvit";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const EXPLAIN_FILE: &str = "explain.json";
pub const BENCH_FILE: &str = "bench.json";

/// Subdirectory of a manifest root that receives augmented images.
pub const AUGMENTED_SUBDIR: &str = "augmented";
pub const CV_AUGMENTED_SUBDIR: &str = "cv_augmented";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Preprocess,
    Split,
    Augment,
    Train,
    Eval,
    Cv,
    Explain,
    Bench,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Split => "split",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Cv => "cv",
            Stage::Explain => "explain",
            Stage::Bench => "bench",
        }
    }
}

/// Resolved locations for one command invocation.
pub struct Context {
    pub cfg: RunConfig,
    pub work: PathBuf,
    pub out: PathBuf,
}

fn missing(field: &str, path: &Path, hint: &str) -> Error {
    Error::config(field, format!("{} does not exist; {hint}", path.display()))
}

impl Context {
    pub fn new(cfg: RunConfig, stage: Stage, work: PathBuf, out: Option<PathBuf>) -> Self {
        let out = match (out, stage) {
            (Some(o), _) => o,
            (None, Stage::Synth) => Self::data_root_of(&cfg, &work),
            (None, _) => work.join(stage.name()),
        };
        Self { cfg, work, out }
    }

    fn data_root_of(cfg: &RunConfig, work: &Path) -> PathBuf {
        cfg.paths.data_root.as_ref().map_or_else(|| work.join("data"), |p| work.join(p))
    }

    pub fn data_root(&self) -> PathBuf {
        Self::data_root_of(&self.cfg, &self.work)
    }

    /// Input manifest: `paths.manifest` or the output of stage `default`.
    fn manifest_path(&self, default: Stage) -> Result<PathBuf> {
        let path = match &self.cfg.paths.manifest {
            Some(p) => self.work.join(p),
            None => self.work.join(default.name()).join(MANIFEST_FILE),
        };
        if !path.is_file() {
            return Err(missing("paths.manifest", &path, &format!("run `{}` first or set paths.manifest", default.name())));
        }
        Ok(path)
    }

    fn checkpoint_path(&self) -> Result<PathBuf> {
        let path = match &self.cfg.paths.checkpoint {
            Some(p) => self.work.join(p),
            None => self.work.join(Stage::Train.name()).join(CHECKPOINT_FILE),
        };
        if !path.is_file() {
            return Err(missing("paths.checkpoint", &path, "run `train` first or set paths.checkpoint"));
        }
        Ok(path)
    }

    fn prepare_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.cfg.to_json()).map_err(|e| Error::io(&path, e))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.out.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn save_manifest(&self, manifest: &DatasetManifest) -> Result<PathBuf> {
        let path = self.out.join(MANIFEST_FILE);
        manifest.save(&path)?;
        Ok(path)
    }

    fn check_classes(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.num_classes() != self.cfg.model.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!("{} differs from the {} classes in the manifest", self.cfg.model.num_classes, manifest.num_classes()),
            ));
        }
        Ok(())
    }

    fn load_model(&self) -> Result<ModelParams> {
        load_checkpoint(&self.checkpoint_path()?, Some(&self.cfg.model))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.cfg.seed, ..self.cfg.train.clone() }
    }
}

pub fn run_stage(stage: Stage, ctx: &Context) -> Result<Value> {
    match stage {
        Stage::Synth => synth(ctx),
        Stage::Ingest => ingest_stage(ctx),
        Stage::Preprocess => preprocess(ctx),
        Stage::Split => split(ctx),
        Stage::Augment => augment(ctx),
        Stage::Train => train_stage(ctx),
        Stage::Eval => eval(ctx),
        Stage::Cv => cv(ctx),
        Stage::Explain => explain(ctx),
        Stage::Bench => bench(ctx),
    }
}

fn synth(ctx: &Context) -> Result<Value> {
    ctx.prepare_out()?;
    let spec = SynthSpec { per_class: ctx.cfg.synth.per_class, size: ctx.cfg.synth.size, seed: ctx.cfg.seed };
    let ann = generate_synthetic(&ctx.out, &spec)?;
    Ok(json!({ "images": spec.per_class * 3, "lesions": ann.lesions.len(), "root": ctx.out }))
}

fn ingest_stage(ctx: &Context) -> Result<Value> {
    let root = ctx.data_root();
    if !root.is_dir() {
        return Err(missing("paths.data_root", &root, "run `synth` or point paths.data_root at an image tree"));
    }
    let got = ingest(&root)?;
    ctx.prepare_out()?;
    let path = ctx.save_manifest(&got.manifest)?;
    Ok(json!({ "records": got.manifest.records.len(), "classes": got.manifest.labels, "skipped": got.skipped, "manifest": path }))
}

fn preprocess(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Ingest)?)?;
    ctx.prepare_out()?;
    let out = preprocess_dataset(&manifest, &ctx.cfg.preprocess, &ctx.out, "images")?;
    let path = ctx.save_manifest(&out)?;
    Ok(json!({ "records": out.records.len(), "manifest": path }))
}

fn split(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Preprocess)?)?;
    let out = stratified_split(&manifest, ctx.cfg.split, ctx.cfg.seed)?;
    ctx.prepare_out()?;
    let path = ctx.save_manifest(&out)?;
    let counts: BTreeMap<&str, usize> = Split::ALL.iter().map(|&s| (s.as_str(), out.count(Some(s), None))).collect();
    Ok(json!({ "counts": counts, "content_hash": out.content_hash, "manifest": path }))
}

fn augment(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Split)?)?;
    ctx.prepare_out()?;
    let out = augment_training_set(&manifest, &ctx.cfg.augment, ctx.cfg.seed, AUGMENTED_SUBDIR)?;
    let path = ctx.save_manifest(&out)?;
    Ok(json!({ "train_records": out.count(Some(Split::Train), None), "content_hash": out.content_hash, "manifest": path }))
}

fn train_stage(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Augment)?)?;
    ctx.check_classes(&manifest)?;
    let train_set = LabeledImages::from_manifest(&manifest.split(Split::Train))?;
    let val_manifest = manifest.split(Split::Val);
    let val_set = if val_manifest.records.is_empty() { None } else { Some(LabeledImages::from_manifest(&val_manifest)?) };
    ctx.prepare_out()?;
    let params = build_model(&ctx.cfg.model, ctx.cfg.seed)?;
    let (params, log) = train(params, &train_set, val_set.as_ref(), &ctx.train_config())?;
    save_checkpoint(&params, &ctx.out.join(CHECKPOINT_FILE))?;
    log.write_csv(&ctx.out.join(TRAIN_LOG_FILE))?;
    let last = log.epochs.last();
    Ok(json!({
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "final_train_acc": last.map(|e| e.train_acc),
        "final_val_acc": last.and_then(|e| e.val_acc),
        "checkpoint": ctx.out.join(CHECKPOINT_FILE),
    }))
}

fn original_split(manifest: &DatasetManifest, split: Split) -> DatasetManifest {
    manifest.filtered(|r| r.split == Some(split) && r.is_original())
}

fn eval(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Split)?)?;
    ctx.check_classes(&manifest)?;
    let params = ctx.load_model()?;
    let subset = original_split(&manifest, ctx.cfg.metrics.split);
    ctx.prepare_out()?;
    let mut timings = BTreeMap::new();
    let (data, _) = measure_phase(&mut timings, "load", || LabeledImages::from_manifest(&subset));
    let data = data?;
    let (evaluation, secs) =
        measure_phase(&mut timings, "inference", || evaluate(&params, &data, ctx.cfg.train.eval_batch_size));
    let evaluation = evaluation?;
    timings.insert("inference_per_image".into(), secs / data.len() as f64);
    let k = manifest.num_classes();
    let cm = confusion_matrix(&evaluation.labels, &evaluation.predictions, k)?;
    let mut report = EvalReport::new(cm, &manifest.labels)?;
    let m = &ctx.cfg.metrics;
    let (ci, _) = measure_phase(&mut timings, "bootstrap", || {
        [Statistic::Accuracy, Statistic::Mcc]
            .into_iter()
            .map(|s| bootstrap_ci(&evaluation.labels, &evaluation.predictions, k, s, m.resamples, m.level, ctx.cfg.seed))
            .collect::<Result<Vec<_>>>()
    });
    report.ci = ci?;
    report.timings = timings;
    report.check_reference(&ReferenceClaim::POTATO_LEAF);
    let path = ctx.out.join(REPORT_FILE);
    report.save(&path)?;
    let csv = ctx.out.join(CONFUSION_FILE);
    std::fs::write(&csv, report.confusion.to_csv(&manifest.labels)).map_err(|e| Error::io(&csv, e))?;
    Ok(json!({ "samples": report.samples, "accuracy": report.accuracy, "mcc": report.mcc, "report": path }))
}

fn cv(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Split)?)?;
    ctx.check_classes(&manifest)?;
    let originals = manifest.filtered(|r| r.is_original());
    ctx.prepare_out()?;
    let train_cfg = TrainConfig { epochs: ctx.cfg.cv.epochs.unwrap_or(ctx.cfg.train.epochs), ..ctx.train_config() };
    let augment = ctx.cfg.cv.augment.then(|| ctx.cfg.augment.clone());
    let mut runner = ViTFoldRunner::new(ctx.cfg.model.clone(), train_cfg, augment, CV_AUGMENTED_SUBDIR);
    let report = run_cross_validation(&originals, ctx.cfg.cv.folds, ctx.cfg.seed, &mut runner)?;
    for (fold, log) in runner.logs.iter().enumerate() {
        log.write_csv(&ctx.out.join(format!("fold{fold}_{TRAIN_LOG_FILE}")))?;
    }
    let path = ctx.write_json(CV_REPORT_FILE, &report)?;
    Ok(json!({ "folds": report.k, "fold_accuracies": report.fold_accuracies, "mean": report.mean, "std": report.std, "report": path }))
}

#[derive(Serialize)]
struct Explained {
    path: String,
    label: usize,
    prediction: usize,
    target_class: usize,
    target_block: usize,
    argmax_patch: usize,
    lesion_box: Option<[usize; 4]>,
    lesion_mean: Option<f64>,
    background_mean: Option<f64>,
    heatmap_csv: String,
    overlay: String,
}

fn explain(ctx: &Context) -> Result<Value> {
    let manifest = DatasetManifest::load(&ctx.manifest_path(Stage::Split)?)?;
    ctx.check_classes(&manifest)?;
    let params = ctx.load_model()?;
    let annotations = match &ctx.cfg.paths.annotations {
        Some(p) => {
            let path = ctx.work.join(p);
            if !path.is_file() {
                return Err(missing("paths.annotations", &path, "set paths.annotations to a synth annotations file"));
            }
            Some(SynthAnnotations::load(&path)?)
        }
        None => {
            let path = ctx.data_root().join(ANNOTATIONS_FILE);
            path.is_file().then(|| SynthAnnotations::load(&path)).transpose()?
        }
    };
    let size = ctx.cfg.model.image_size;
    let subset = original_split(&manifest, ctx.cfg.explain.split);
    let lesion = |r: &tinyvit_core::dataset::SampleRecord| annotations.as_ref().and_then(|a| a.lesion_for(&r.path, size));
    let mut chosen: Vec<_> = subset.records.iter().filter(|r| lesion(r).is_some()).collect();
    chosen.extend(subset.records.iter().filter(|r| lesion(r).is_none()));
    chosen.truncate(ctx.cfg.explain.count);
    ctx.prepare_out()?;

    let results = chosen
        .par_iter()
        .map(|r| {
            let raw = subset.load_image(r)?;
            let img = normalize01(&raw.to_rgb());
            let logits = params.forward(&tinyvit_core::model::images_to_batch(&[&img])?)?;
            let prediction = argmax(logits.data());
            let target = if ctx.cfg.explain.use_label { r.class_id } else { prediction };
            let hm = compute_gradcam(&params, &img, target, ctx.cfg.explain.target_block)?;
            let stem = r.path.rsplit('/').next().unwrap_or(&r.path).rsplit_once('.').map_or(r.path.as_str(), |(s, _)| s);
            let csv = ctx.out.join(format!("{stem}_heatmap.csv"));
            hm.write_csv(&csv)?;
            let overlay = ctx.out.join(format!("{stem}_overlay.png"));
            write_image(&overlay, &render_overlay(&hm, &raw))?;
            let bbox = lesion(r);
            let means = bbox.map(|b| hm.region_means(raw.height(), raw.width(), b)).transpose()?;
            Ok(Explained {
                path: r.path.clone(),
                label: r.class_id,
                prediction,
                target_class: target,
                target_block: hm.target_block,
                argmax_patch: hm.argmax(),
                lesion_box: bbox,
                lesion_mean: means.map(|m| m.0),
                background_mean: means.map(|m| m.1),
                heatmap_csv: csv.to_string_lossy().into_owned(),
                overlay: overlay.to_string_lossy().into_owned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let lesioned: Vec<&Explained> = results.iter().filter(|e| e.lesion_mean.is_some()).collect();
    let inside = lesioned.iter().filter(|e| e.lesion_mean > e.background_mean).count();
    let fraction = if lesioned.is_empty() { None } else { Some(inside as f64 / lesioned.len() as f64) };
    let summary = json!({
        "explained": results.len(),
        "lesioned": lesioned.len(),
        "lesion_exceeds_background": inside,
        "lesion_fraction": fraction,
        "images": results,
    });
    let path = ctx.write_json(EXPLAIN_FILE, &summary)?;
    Ok(json!({ "explained": results.len(), "lesioned": lesioned.len(), "lesion_fraction": fraction, "summary": path }))
}

fn argmax(values: &[f32]) -> usize {
    values.iter().enumerate().fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

#[derive(Serialize)]
struct BenchEntry {
    model: ViTConfig,
    parameters: usize,
    batch_seconds: BenchStats,
    per_image_ms: f64,
}

/// Inference timing of the configured model against a twice as deep and
/// twice as wide variant, single-threaded.
fn bench(ctx: &Context) -> Result<Value> {
    let base = ctx.cfg.model.clone();
    let scaled = ViTConfig { depth: base.depth * 2, embed_dim: base.embed_dim * 2, ..base.clone() };
    let b = &ctx.cfg.bench;
    let mut rng = seed::rng(ctx.cfg.seed, &[]);
    let s = base.image_size;
    let batch = Tensor::from_fn(&[b.batch, s, s, 3], |_| rng.random::<f32>());
    ctx.prepare_out()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Contract(format!("cannot build a single-thread pool: {e}")))?;
    let entries = [base, scaled]
        .into_iter()
        .map(|cfg| {
            let params = build_model(&cfg, ctx.cfg.seed)?;
            params.forward(&batch)?;
            let stats = pool.install(|| benchmark(b.warmup, b.repeats, || params.forward(&batch)));
            Ok(BenchEntry {
                parameters: parameter_count(&cfg),
                model: cfg,
                per_image_ms: stats.mean * 1e3 / b.batch as f64,
                batch_seconds: stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let faster = entries[0].batch_seconds.mean < entries[1].batch_seconds.mean;
    let summary = json!({ "batch": b.batch, "base": entries[0], "scaled": entries[1], "base_is_faster": faster });
    let path = ctx.write_json(BENCH_FILE, &summary)?;
    Ok(json!({
        "base_mean": entries[0].batch_seconds.mean,
        "scaled_mean": entries[1].batch_seconds.mean,
        "base_is_faster": faster,
        "summary": path,
    }))
}

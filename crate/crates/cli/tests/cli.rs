use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "synth.per_class=10",
    "synth.size=32",
    "preprocess.size=32",
    "model.image_size=32",
    "model.embed_dim=16",
    "model.heads=2",
    "model.depth=1",
    "train.epochs=1",
    "cv.folds=2",
    "cv.epochs=1",
    "metrics.resamples=50",
    "explain.count=2",
    "bench.batch=2",
    "bench.warmup=0",
    "bench.repeats=1",
];

fn tinyvit(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyvit"))
        .arg("--workdir")
        .arg(work)
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .expect("binary starts")
}

fn stage(work: &Path, name: &str, extra: &[&str]) -> Value {
    let mut args = vec![name];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let out = tinyvit(work, &args);
    assert!(out.status.success(), "`{name}` failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tinyvit(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(tinyvit(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn bad_override_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = tinyvit(dir.path(), &["synth", "train.epochz=3"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["field"].as_str().unwrap().contains("epochz"), "{err}");

    let out = tinyvit(dir.path(), &["synth", "split.train=0.9"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["field"].as_str().unwrap().starts_with("split"));
}

#[test]
fn missing_input_names_the_path_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = tinyvit(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["field"], "paths.manifest");
}

#[test]
fn unreadable_image_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let class = dir.path().join("data/healthy");
    std::fs::create_dir_all(&class).unwrap();
    std::fs::write(class.join("broken.png"), b"not a png").unwrap();
    stage(dir.path(), "ingest", &[]);
    let out = tinyvit(dir.path(), &["preprocess"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("broken.png"));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    for name in ["synth", "ingest", "preprocess", "split"] {
        stage(work, name, &[]);
    }

    let first = stage(work, "split", &["--seed", "42"]);
    let again = stage(work, "split", &["--seed", "42"]);
    assert_eq!(first["summary"]["content_hash"], again["summary"]["content_hash"]);
    let other = stage(work, "split", &["--seed", "7"]);
    assert_ne!(first["summary"]["content_hash"], other["summary"]["content_hash"]);
    stage(work, "split", &[]);

    for name in ["augment", "train", "eval", "cv", "explain", "bench"] {
        let summary = stage(work, name, &[]);
        assert_eq!(summary["command"], name);
        assert!(work.join(name).join("resolved_config.json").is_file(), "{name} has no config snapshot");
    }
    assert!(work.join("data/resolved_config.json").is_file());

    let report: Value = serde_json::from_str(&std::fs::read_to_string(work.join("eval/report.json")).unwrap()).unwrap();
    for key in ["schema_version", "confusion", "accuracy", "mcc", "per_class", "ci", "timings", "samples"] {
        assert!(report.get(key).is_some(), "report.json lacks `{key}`: {report}");
    }
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    assert!(work.join("train/checkpoint.tvit").is_file());
    assert!(work.join("train/train_log.csv").is_file());
    assert!(work.join("eval/confusion.csv").is_file());
    assert!(work.join("cv/cv_report.json").is_file());
    assert!(work.join("explain/explain.json").is_file());
    assert!(work.join("bench/bench.json").is_file());
}

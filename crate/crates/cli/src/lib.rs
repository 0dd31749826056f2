//! Command-line front end for the tinyvit pipeline.
//!
//! Stages: `synth`, `ingest`, `preprocess`, `split`, `augment`, `train`,
//! `eval`, `cv`, `explain` and `bench`. Each stage writes into
//! `<work>/<stage>/` (or `--out`) and reads the previous stage's output
//! unless an input path is set in the configuration.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use tinyvit_core::Error;

pub use commands::{run_stage, Context, Stage};
pub use config::RunConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tinyvit", version, about = "Compact vision transformer lab for leaf disease classification")]
pub struct Cli {
    /// JSON configuration layered over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives the bitwise reproducible mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory of this stage.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Work directory holding every stage's outputs.
    #[arg(long, global = true, env = "TINYVIT_WORKDIR", default_value = "tinyvit-work", value_name = "DIR")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural three-class leaf dataset.
    Synth(Overrides),
    /// Scan a class-per-directory image tree into a manifest.
    Ingest(Overrides),
    /// Resize, equalize (CLAHE) and blur every image.
    Preprocess(Overrides),
    /// Stratified train/val/test assignment.
    Split(Overrides),
    /// Add augmented copies of every training image.
    Augment(Overrides),
    /// Train a model and write a checkpoint and a per-epoch log.
    Train(Overrides),
    /// Evaluate a checkpoint: accuracy, MCC, bootstrap intervals.
    Eval(Overrides),
    /// Stratified k-fold cross-validation.
    Cv(Overrides),
    /// Grad-CAM heatmaps and overlays.
    Explain(Overrides),
    /// Inference timing against a deeper and wider variant.
    Bench(Overrides),
}

#[derive(Debug, clap::Args)]
pub struct Overrides {
    /// Configuration overrides such as `train.epochs=5`.
    #[arg(value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Command {
    fn parts(&self) -> (Stage, &[String]) {
        let (stage, o) = match self {
            Command::Synth(o) => (Stage::Synth, o),
            Command::Ingest(o) => (Stage::Ingest, o),
            Command::Preprocess(o) => (Stage::Preprocess, o),
            Command::Split(o) => (Stage::Split, o),
            Command::Augment(o) => (Stage::Augment, o),
            Command::Train(o) => (Stage::Train, o),
            Command::Eval(o) => (Stage::Eval, o),
            Command::Cv(o) => (Stage::Cv, o),
            Command::Explain(o) => (Stage::Explain, o),
            Command::Bench(o) => (Stage::Bench, o),
        };
        (stage, &o.set)
    }
}

/// Resolves configuration and runs the parsed command.
pub fn execute(cli: &Cli) -> tinyvit_core::Result<serde_json::Value> {
    let (stage, sets) = cli.command.parts();
    let mut overrides = sets.to_vec();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    let work = cfg.paths.work_dir.clone().unwrap_or_else(|| cli.workdir.clone());
    let ctx = Context::new(cfg, stage, work, cli.out.clone());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?;
    let summary = pool.install(|| run_stage(stage, &ctx))?;
    Ok(json!({ "command": stage.name(), "out": ctx.out, "summary": summary }))
}

/// Single-line JSON error for stderr.
pub fn error_line(err: &Error) -> String {
    let mut value = json!({ "error": err.kind(), "message": err.to_string() });
    if let Error::Config { field, .. } = err {
        value["field"] = json!(field);
    }
    value.to_string()
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// The summary goes to stdout and failures to stderr as one JSON line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(err) => {
            eprintln!("{}", error_line(&err));
            exit_code(&err)
        }
    }
}

//! Command-line entry points: `train`, `test` and `gen-data`.
//!
//! Every failure prints one line to stderr of the form
//! `error[E-CONFIG]: <message>` and exits with the code of its class:
//! 2 for configuration errors, 3 for runtime failures, 4 when a
//! checkpoint does not fit the configured model.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::CheckpointError;
use crate::config::{load_config, merge_config, Config, ConfigError};
use crate::datasets::{generate_synthetic_dataset, DatasetError, SyntheticSpec};
use crate::engine::{fit, load_model_weights, prepare_model, EngineError, InferenceMode, RunOptions};
use crate::error::ModelError;
use crate::evaluation::{evaluate, write_report, EvalError, ModelPredictor, PredictionSink};

/// Default root for run directories when `--work-dir` is absent.
pub const WORK_DIR_ENV: &str = "SSSEG_WORK_DIR";
const DEFAULT_WORK_ROOT: &str = "work_dirs";

#[derive(Debug, Parser)]
#[command(name = "ssseg", version, about = "Config-driven semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model to `scheduler.max_iters`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the val split.
    Test(TestArgs),
    /// Write a synthetic shapes dataset.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to `$SSSEG_WORK_DIR/<config name>`.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub fp16: bool,
    /// Dotted overrides, e.g. `--set optimizer.base_lr=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write index and color PNGs under `<run>/predictions/`.
    #[arg(long)]
    pub save_pred: bool,
    /// Sliding-window inference with `runtime.inference.window`.
    #[arg(long)]
    pub slide: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// `H` or `HxW`.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let bad = |_| format!("size must be H or HxW, got `{s}`");
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.trim().parse().map_err(bad)?, w.trim().parse().map_err(bad)?)),
        None => {
            let n = s.trim().parse().map_err(bad)?;
            Ok((n, n))
        }
    }
}

/// A failure classified by exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Runtime,
    Checkpoint,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Runtime => 3,
            ErrorKind::Checkpoint => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Config => "E-CONFIG",
            ErrorKind::Runtime => "E-RUNTIME",
            ErrorKind::Checkpoint => "E-CHECKPOINT",
        }
    }
}

impl CliError {
    fn new(kind: ErrorKind, message: impl ToString) -> Self {
        Self { kind, message: message.to_string() }
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.kind.tag(), flat.join(" "))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(ErrorKind::Config, e)
    }
}

fn checkpoint_kind(e: &CheckpointError) -> ErrorKind {
    match e {
        CheckpointError::Io { .. } => ErrorKind::Runtime,
        _ => ErrorKind::Checkpoint,
    }
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::InvalidSpec(_) | ModelError::Config(_) => ErrorKind::Config,
        ModelError::Tensor(_) => ErrorKind::Runtime,
        ModelError::Checkpoint(c) => checkpoint_kind(c),
    }
}

fn dataset_kind(e: &DatasetError) -> ErrorKind {
    match e {
        DatasetError::BadDescriptor(_) | DatasetError::BadPipeline(_) | DatasetError::Invalid(_) => ErrorKind::Config,
        _ => ErrorKind::Runtime,
    }
}

fn eval_kind(e: &EvalError) -> ErrorKind {
    match e {
        EvalError::BadWindow(_) => ErrorKind::Config,
        EvalError::Model(m) => model_kind(m),
        EvalError::Dataset(d) => dataset_kind(d),
        _ => ErrorKind::Runtime,
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let kind = match &e {
            EngineError::Config(_) | EngineError::Optim(_) => ErrorKind::Config,
            EngineError::Model(m) => model_kind(m),
            EngineError::Dataset(d) => dataset_kind(d),
            EngineError::Checkpoint(c) => checkpoint_kind(c),
            EngineError::Eval(v) => eval_kind(v),
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::new(eval_kind(&e), e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::new(dataset_kind(&e), e)
    }
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::new(ErrorKind::Config, first.trim_start_matches("error: "));
            eprintln!("{}", err.line());
            return err.kind.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Test(a) => cmd_test(&a).map(|_| ()),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

fn work_root() -> PathBuf {
    std::env::var_os(WORK_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_WORK_ROOT))
}

fn config_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

/// Load the config and fold the runtime flags into it.
pub fn train_config(a: &TrainArgs) -> Result<Config, CliError> {
    let mut cfg = load_config(&a.config, &a.overrides)?;
    let mut runtime = serde_json::Map::new();
    if let Some(s) = a.seed {
        runtime.insert("seed".into(), json!(s));
    }
    if a.deterministic {
        runtime.insert("deterministic".into(), json!(true));
    }
    if a.fp16 {
        runtime.insert("fp16".into(), json!(true));
    }
    if !runtime.is_empty() {
        cfg = merge_config(&cfg, &Config::from_value(json!({ "runtime": runtime }))?)?;
    }
    Ok(cfg)
}

/// Returns the run directory.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf, CliError> {
    let cfg = train_config(a)?;
    let work_dir = a.work_dir.clone().unwrap_or_else(|| work_root().join(config_stem(&a.config)));
    let art = fit(&cfg, &RunOptions { work_dir: work_dir.clone(), resume: a.resume.clone() })?;
    println!(
        "finished {} iterations; mIoU {:.4} aAcc {:.4}; report {}",
        art.steps.last().map_or(0, |s| s.iteration + 1),
        art.final_metrics.miou,
        art.final_metrics.aacc,
        art.report.display()
    );
    Ok(work_dir)
}

/// The run directory a checkpoint belongs to: the parent of its
/// `checkpoints/` folder, or its own folder otherwise.
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

/// Evaluate and write `<run>/test_<checkpoint>[_slide].json`; returns its
/// path.
pub fn cmd_test(a: &TestArgs) -> Result<PathBuf, CliError> {
    let cfg = load_config(&a.config, &[])?;
    let (section, desc, mut trainer) = prepare_model(&cfg)?;
    load_model_weights(&mut trainer.state.store, &a.checkpoint)?;
    let mut spec = trainer.runtime.inference.clone();
    if a.slide {
        spec.mode = InferenceMode::Slide;
        if spec.window.is_none() {
            return Err(CliError::new(ErrorKind::Config, "--slide needs runtime.inference.window in the config"));
        }
    }
    let val = section.val_set()?;
    let run = run_dir_of(&a.checkpoint);
    let stem = config_stem(&a.checkpoint);
    let suffix = if spec.mode == InferenceMode::Slide { "_slide" } else { "" };
    let pred_dir = run.join("predictions").join(format!("{stem}{suffix}"));
    let sink = PredictionSink { dir: &pred_dir, palette: &desc.palette };
    let p = ModelPredictor { segmentor: &trainer.segmentor, store: &trainer.state.store };
    let (report, _) = evaluate(&p, &val, &spec, a.save_pred.then_some(&sink))?;
    let path = run.join(format!("test_{stem}{suffix}.json"));
    let mode = if spec.mode == InferenceMode::Slide { "slide" } else { "whole" };
    write_report(&path, &report, &val.descriptor.class_names, json!({"split": section.val_split, "mode": mode}))?;
    println!("{}", serde_json::to_string_pretty(&json!({"miou": report.miou, "aacc": report.aacc, "macc": report.macc})).expect("json"));
    for (name, iou) in val.descriptor.class_names.iter().zip(&report.per_class_iou) {
        match iou {
            Some(v) => println!("  {name:<16} IoU {v:.4}"),
            None => println!("  {name:<16} IoU n/a"),
        }
    }
    println!("report {}", path.display());
    Ok(path)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec::new(a.seed, a.count, a.size, a.classes);
    let desc = generate_synthetic_dataset(&spec, &a.out)?;
    println!("wrote {} images ({} train) to {}", a.count, desc.len(), a.out.display());
    Ok(())
}

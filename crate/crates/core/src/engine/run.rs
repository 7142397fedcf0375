//! The iteration-based training driver behind `ssseg train`.
//!
//! Run directory layout:
//!
//! ```text
//! config.json              snapshot of the resolved config, written first
//! logs/train.jsonl         one StepMetrics record per iteration
//! logs/eval.jsonl          one record per evaluation
//! checkpoints/iter_<n>.ckpt, latest.ckpt, best.ckpt
//! metrics.json             report of the last evaluation
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use ssseg_nn::ParamStore;

use super::{EngineError, Result, StepMetrics, Trainer};
use crate::checkpoint::{load_params, read_container};
use crate::config::Config;
use crate::datasets::{mix_seed, DatasetDescriptor, DatasetSection, SegDataset};
use crate::evaluation::{evaluate, write_report, MetricsReport, ModelPredictor};
use crate::util::write_atomic;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub work_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub work_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub report: PathBuf,
    pub final_metrics: MetricsReport,
    pub best_miou: Option<f64>,
    pub steps: Vec<StepMetrics>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.display().to_string(), source }
}

/// Dataset section and a trainer whose class count comes from the
/// training split's descriptor.
pub fn prepare_model(cfg: &Config) -> Result<(DatasetSection, DatasetDescriptor, Trainer)> {
    let section = DatasetSection::parse(cfg.section("dataset").unwrap_or(&Value::Null))?;
    let desc = DatasetDescriptor::open(section.root()?, &section.train_split)?;
    let trainer = Trainer::from_config(cfg, desc.num_classes)?;
    Ok((section, desc, trainer))
}

/// Load parameters (not optimizer state) from a checkpoint; every model
/// parameter must be present with a matching shape.
pub fn load_model_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let c = read_container(path)?;
    let params: Vec<_> = c.tensors.into_iter().filter(|(n, _)| !n.starts_with("optim.")).collect();
    load_params(store, &params, true)?;
    Ok(())
}

/// Parse a JSON-lines log.
pub fn read_metric_log(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EngineError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Drop the wall-clock field so logs of separate runs can be compared.
pub fn strip_time(records: &[Value]) -> Vec<Value> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(m) = r.as_object_mut() {
                m.remove("time");
            }
            r
        })
        .collect()
}

fn evaluate_val(trainer: &Trainer, val: &SegDataset) -> Result<MetricsReport> {
    let p = ModelPredictor { segmentor: &trainer.segmentor, store: &trainer.state.store };
    let (report, _) = evaluate(&p, val, &trainer.runtime.inference, None)?;
    Ok(report)
}

/// Train to `max_iters`, checkpointing and evaluating on schedule.
pub fn fit(cfg: &Config, opts: &RunOptions) -> Result<RunArtifacts> {
    let wd = &opts.work_dir;
    let ckpt_dir = wd.join("checkpoints");
    let log_dir = wd.join("logs");
    for d in [wd, &ckpt_dir, &log_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let snapshot = wd.join("config.json");
    write_atomic(&snapshot, cfg.to_pretty_string().as_bytes()).map_err(io_err(&snapshot))?;

    let (section, desc, mut trainer) = prepare_model(cfg)?;
    if let Some(r) = &opts.resume {
        trainer.load_checkpoint(r)?;
        log::info!("resumed from {} at iteration {}", r.display(), trainer.state.iteration);
    }
    let start = trainer.state.iteration;
    let train_log = log_dir.join("train.jsonl");
    let eval_log = log_dir.join("eval.jsonl");
    // step records carry the iteration they started from, eval records the
    // iteration they ran at
    truncate_log(&train_log, |i| i < start)?;
    truncate_log(&eval_log, |i| i <= start && start > 0)?;

    let seed = trainer.runtime.seed;
    let mut loader = section.train_loader(mix_seed(&[seed, 0xda7a]), trainer.segmentor.size_divisor())?;
    if let Some(s) = trainer.state.sampler {
        loader.sampler_mut().set_state(s);
    }
    let val = section.val_set()?;
    let max = trainer.max_iters();
    let rt = trainer.runtime.clone();
    let mut steps = Vec::new();
    let mut last_report = None;
    let latest = ckpt_dir.join("latest.ckpt");
    while !trainer.is_finished() {
        let batch = loader.next_batch()?;
        trainer.state.sampler = Some(loader.sampler().state());
        let m = trainer.train_step(&batch)?;
        append_line(&train_log, &serde_json::to_value(&m).expect("metrics serialize"))?;
        if m.iteration % 50 == 0 || m.iteration + 1 == max {
            log::info!(
                "iter {}/{} loss {:.4} (main {:.4}, aux {:.4}) lr {:.6} scale {} {:.3}s",
                m.iteration + 1,
                max,
                m.total_loss,
                m.main_loss,
                m.aux_loss,
                m.lr,
                m.loss_scale,
                m.time
            );
        }
        steps.push(m);
        let it = trainer.state.iteration;
        let done = it == max;
        if done || rt.eval_interval.is_some_and(|e| it % e == 0) {
            let report = evaluate_val(&trainer, &val)?;
            let improved = trainer.state.best_metric.is_none_or(|b| report.miou > b);
            if improved {
                trainer.state.best_metric = Some(report.miou);
            }
            let rec = json!({"iteration": it, "miou": report.miou, "aacc": report.aacc, "macc": report.macc});
            trainer.state.history.push(rec.clone());
            append_line(&eval_log, &rec)?;
            log::info!("eval at {it}: mIoU {:.4} aAcc {:.4}", report.miou, report.aacc);
            if improved {
                trainer.save_checkpoint(&ckpt_dir.join("best.ckpt"), cfg.as_value())?;
            }
            last_report = Some(report);
        }
        if done || rt.checkpoint_interval.is_some_and(|c| it % c == 0) {
            trainer.save_checkpoint(&ckpt_dir.join(format!("iter_{it}.ckpt")), cfg.as_value())?;
            trainer.save_checkpoint(&latest, cfg.as_value())?;
        }
    }
    let report = match last_report {
        Some(r) => r,
        None => evaluate_val(&trainer, &val)?,
    };
    let report_path = wd.join("metrics.json");
    write_report(
        &report_path,
        &report,
        &desc.class_names,
        json!({"iteration": trainer.state.iteration, "split": section.val_split, "best_miou": trainer.state.best_metric}),
    )?;
    if !latest.exists() {
        trainer.save_checkpoint(&latest, cfg.as_value())?;
    }
    Ok(RunArtifacts {
        work_dir: wd.clone(),
        final_checkpoint: latest,
        report: report_path,
        final_metrics: report,
        best_miou: trainer.state.best_metric,
        steps,
    })
}

fn append_line(path: &Path, v: &Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{v}").map_err(io_err(path))
}

/// Keep only the records `keep` accepts, so a resumed run does not
/// duplicate entries written after its checkpoint.
fn truncate_log(path: &Path, keep: impl Fn(u64) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = read_metric_log(path)?
        .into_iter()
        .filter(|r| r["iteration"].as_u64().is_some_and(&keep))
        .map(|r| r.to_string())
        .collect();
    let mut text = keep.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

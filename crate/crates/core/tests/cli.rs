//! End-to-end runs of the `ssseg` binary.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use ssseg::checkpoint::read_container;
use ssseg::engine::Trainer;

fn ssseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ssseg_in(work_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env(ssseg::cli::WORK_DIR_ENV, work_root)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The process failed with `code` and a single tagged stderr line.
fn assert_fails(o: &Output, code: i32, tag: &str) {
    let err = stderr(o);
    assert_eq!(o.status.code(), Some(code), "stderr: {err}");
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one line, got {err:?}");
    assert!(lines[0].starts_with(&format!("error[{tag}]: ")), "{}", lines[0]);
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn config(name: &str) -> String {
    common::configs_dir().join(format!("{name}.json")).display().to_string()
}

/// `--set` overrides for a small run on a 40-image 32px dataset.
fn small_run(iters: usize) -> Vec<String> {
    let root = common::dataset(40, 32, 4);
    let mut o = common::dataset_overrides(&root, 40, 32, 4);
    o.push(format!("scheduler.max_iters={iters}"));
    o.push(format!("runtime.checkpoint_interval={}", iters / 2));
    o.push(format!("runtime.eval_interval={}", iters / 2));
    o
}

fn train(config_name: &str, work_dir: &Path, sets: &[String], extra: &[&str]) -> Output {
    let cfg = config(config_name);
    let wd = work_dir.display().to_string();
    let mut args = vec!["train", "--config", &cfg, "--work-dir", &wd];
    args.extend_from_slice(extra);
    args.push("--set");
    args.extend(sets.iter().map(String::as_str));
    ssseg(&args)
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn params_of(path: &Path) -> BTreeMap<String, Vec<u32>> {
    read_container(path)
        .unwrap()
        .tensors
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<String> = ["a", "b"].iter().map(|d| tmp.path().join(d).display().to_string()).collect();
    for d in &dirs {
        assert_ok(&ssseg(&["gen-data", "--count", "12", "--size", "24x32", "--classes", "3", "--out", d]));
    }
    let a = files_under(Path::new(&dirs[0]));
    assert!(a.keys().any(|p| p.starts_with("images")) && a.keys().any(|p| p.starts_with("annotations")));
    assert!(a.contains_key(Path::new("meta.json")));
    assert_eq!(a, files_under(Path::new(&dirs[1])));
}

#[test]
fn gen_data_needs_two_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d").display().to_string();
    assert_fails(&ssseg(&["gen-data", "--classes", "1", "--out", &out]), 2, "E-CONFIG");
}

#[test]
fn config_failures_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("run").display().to_string();
    assert_fails(&ssseg(&["train", "--config", "does/not/exist.json", "--work-dir", &wd]), 2, "E-CONFIG");
    assert_fails(&ssseg(&["train", "--config", &config("fcn_tiny"), "--set", "model.nope=1"]), 2, "E-CONFIG");
    assert_fails(&ssseg(&["train", "--bogus-flag"]), 2, "E-CONFIG");
    assert_fails(&ssseg(&["gen-data", "--size", "big", "--out", &wd]), 2, "E-CONFIG");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"model\": [").unwrap();
    assert_fails(&ssseg(&["train", "--config", &bad.display().to_string()]), 2, "E-CONFIG");
}

#[test]
fn train_writes_a_run_directory_and_test_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("fcn");
    assert_ok(&train("fcn_tiny", &wd, &small_run(200), &[]));
    for f in ["config.json", "metrics.json", "logs/train.jsonl", "logs/eval.jsonl", "checkpoints/latest.ckpt", "checkpoints/iter_100.ckpt", "checkpoints/iter_200.ckpt", "checkpoints/best.ckpt"] {
        assert!(wd.join(f).exists(), "missing {f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(wd.join("metrics.json")).unwrap()).unwrap();
    assert!(report["miou"].as_f64().unwrap() > 0.0);

    let cfg = wd.join("config.json").display().to_string();
    let ckpt = wd.join("checkpoints/latest.ckpt").display().to_string();
    assert_ok(&ssseg(&["test", "--config", &cfg, "--checkpoint", &ckpt]));
    let first = fs::read(wd.join("test_latest.json")).unwrap();
    assert_ok(&ssseg(&["test", "--config", &cfg, "--checkpoint", &ckpt, "--save-pred"]));
    assert_eq!(first, fs::read(wd.join("test_latest.json")).unwrap());
    let preds = files_under(&wd.join("predictions/latest"));
    assert_eq!(preds.len(), 2 * 8, "index and color PNG per val image");

    // 32px images fit inside the 48px window: one window, same result
    assert_ok(&ssseg(&["test", "--config", &cfg, "--checkpoint", &ckpt, "--slide"]));
    let strip = |p: &str| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(wd.join(p)).unwrap()).unwrap();
        v["run"].as_object_mut().unwrap().remove("mode");
        v
    };
    assert_eq!(strip("test_latest.json"), strip("test_latest_slide.json"));

    // a pspnet config cannot load fcn weights
    let psp = tmp.path().join("psp.json");
    let mut snapshot: Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    snapshot["model"]["segmentor"] = serde_json::json!({"type": "pspnet", "mid_channels": 32, "bins": [1, 2, 3, 6]});
    fs::write(&psp, snapshot.to_string()).unwrap();
    assert_fails(&ssseg(&["test", "--config", &psp.display().to_string(), "--checkpoint", &ckpt]), 4, "E-CHECKPOINT");
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_fails(&ssseg(&["test", "--config", &cfg, "--checkpoint", &junk.display().to_string()]), 4, "E-CHECKPOINT");
    let missing = tmp.path().join("missing.ckpt").display().to_string();
    assert_fails(&ssseg(&["test", "--config", &cfg, "--checkpoint", &missing]), 3, "E-RUNTIME");
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("zero");
    let mut sets = small_run(10);
    sets.push("optimizer.base_lr=0".into());
    assert_ok(&train("fcn_tiny", &wd, &sets, &[]));
    let cfg = ssseg::config::load_config(wd.join("config.json"), &[]).unwrap();
    let initial = Trainer::from_config(&cfg, 4).unwrap();
    let saved = params_of(&wd.join("checkpoints/latest.ckpt"));
    let mut compared = 0;
    for (_, p) in initial.state.store.trainable() {
        let bits: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(saved[&p.name], bits, "{} moved", p.name);
        compared += 1;
    }
    assert!(compared > 10);
}

#[test]
fn cli_resume_and_snapshot_reproduce_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let sets = small_run(20);
    let full = tmp.path().join("full");
    assert_ok(&train("pspnet_tiny", &full, &sets, &["--deterministic", "--seed", "3"]));
    let final_params = params_of(&full.join("checkpoints/latest.ckpt"));

    let resumed = tmp.path().join("resumed");
    let from = full.join("checkpoints/iter_10.ckpt").display().to_string();
    assert_ok(&train("pspnet_tiny", &resumed, &sets, &["--deterministic", "--seed", "3", "--resume", &from]));
    assert_eq!(params_of(&resumed.join("checkpoints/latest.ckpt")), final_params);

    let again = tmp.path().join("again").display().to_string();
    let snapshot = full.join("config.json").display().to_string();
    assert_ok(&ssseg(&["train", "--config", &snapshot, "--work-dir", &again]));
    assert_eq!(params_of(&Path::new(&again).join("checkpoints/latest.ckpt")), final_params);
}

#[test]
fn ground_truth_echo_scores_one_and_work_dir_env_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let root = common::dataset(40, 32, 4);
    let mut sets = common::dataset_overrides(&root, 40, 32, 4);
    sets.push("scheduler.max_iters=1".into());
    let cfg = config("gt_echo");
    let mut args = vec!["train", "--config", &cfg, "--set"];
    args.extend(sets.iter().map(String::as_str));
    assert_ok(&ssseg_in(tmp.path(), &args));
    let run = tmp.path().join("gt_echo");
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["miou"].as_f64(), Some(1.0));

    let snapshot = run.join("config.json").display().to_string();
    let ckpt = run.join("checkpoints/latest.ckpt").display().to_string();
    assert_ok(&ssseg(&["test", "--config", &snapshot, "--checkpoint", &ckpt]));
    let test: Value = serde_json::from_str(&fs::read_to_string(run.join("test_latest.json")).unwrap()).unwrap();
    assert_eq!(test["miou"].as_f64(), Some(1.0));
    assert_eq!(test["aacc"].as_f64(), Some(1.0));
}

#[test]
fn help_and_version_exit_zero() {
    assert_ok(&ssseg(&["--help"]));
    assert_ok(&ssseg(&["--version"]));
    assert_ok(&ssseg(&["train", "--help"]));
}

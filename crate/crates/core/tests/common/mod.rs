//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ssseg::config::{load_config, Config};
use ssseg::datasets::{build_pipeline, collate, generate_synthetic_dataset, Batch, DatasetDescriptor, SegDataset, SyntheticSpec};
use ssseg_nn::{ParamStore, Tensor};

static GENERATE: Mutex<()> = Mutex::new(());

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn scratch_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

/// Synthetic dataset with the given shape, generated once under the
/// target tmp dir. `val_count` is a fifth of `count`.
pub fn dataset(count: usize, size: usize, classes: usize) -> PathBuf {
    let root = scratch_dir().join(format!("synthetic-s0-n{count}-{size}px-k{classes}"));
    let _guard = GENERATE.lock().unwrap_or_else(|e| e.into_inner());
    if !root.join("meta.json").exists() {
        generate_synthetic_dataset(&SyntheticSpec::new(0, count, (size, size), classes), &root).unwrap();
    }
    root
}

/// Overrides pointing a preset at `root` (made by [`dataset`]).
pub fn dataset_overrides(root: &Path, count: usize, size: usize, classes: usize) -> Vec<String> {
    vec![
        format!("dataset.source.root={}", root.display()),
        format!("dataset.source.count={count}"),
        format!("dataset.source.val_count={}", count / 5),
        format!("dataset.source.size=[{size},{size}]"),
        format!("dataset.source.num_classes={classes}"),
    ]
}

/// A preset from `configs/` bound to a small generated dataset.
pub fn preset(name: &str, count: usize, size: usize, extra: &[&str]) -> Config {
    let root = dataset(count, size, 4);
    let mut o = dataset_overrides(&root, count, size, 4);
    o.extend(extra.iter().map(|s| s.to_string()));
    load_config(configs_dir().join(format!("{name}.json")), &o).unwrap()
}

/// Samples `indices` of a split, normalized and unaugmented.
pub fn batch_of(root: &Path, split: &str, indices: &[usize], size_divisor: usize) -> Batch {
    let desc = DatasetDescriptor::open(root, split).unwrap();
    let ignore = desc.ignore_index;
    let ds = SegDataset::new(desc, build_pipeline(&[serde_json::json!({"type": "normalize"})]).unwrap());
    let samples: Vec<_> = indices.iter().map(|&i| ds.get(i, 0).unwrap()).collect();
    collate(&samples, 0.0, ignore, size_divisor).unwrap()
}

/// The first `n` samples of a split.
pub fn fixed_batch(root: &Path, split: &str, n: usize, size_divisor: usize) -> Batch {
    batch_of(root, split, &(0..n).collect::<Vec<_>>(), size_divisor)
}

/// Uniform values in `[-scale, scale)`.
pub fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Replace every entry of `store` with random values; running variances
/// stay positive.
pub fn randomize(store: &mut ParamStore, rng: &mut impl rand::Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        let shape = p.value.shape().to_vec();
        let mut t = random_tensor(rng, &shape, 1.0);
        if p.name.ends_with("running_var") {
            t = t.map(|v| 0.5 + v.abs());
        }
        store.set(id, t).unwrap();
    }
}

/// Fraction of labelled pixels whose argmax matches.
pub fn pixel_accuracy(logits: &Tensor, masks: &[u8], ignore: u8) -> f64 {
    let pred = logits.argmax_channels().unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(masks) {
        if g != ignore {
            total += 1;
            hit += usize::from(p == g);
        }
    }
    hit as f64 / total.max(1) as f64
}

/// `max |a - b| / max |a|` over one tensor.
pub fn rel_max_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().fold(0f64, |m, &v| m.max(v.abs() as f64));
    let diff = a.data().iter().zip(b.data()).fold(0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

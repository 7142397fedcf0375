//! Python bindings: data generation, config resolution, training and
//! single-image prediction.
//!
//! Images and label maps cross the boundary as raw bytes (`H×W×3` RGB and
//! `H×W` class indices), which `numpy.frombuffer` reads without copies on
//! the Python side.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde_json::Value;
use ssseg::checkpoint::read_container;
use ssseg::config::{load_config, Config, ConfigError};
use ssseg::datasets::{
    apply_pipeline, build_pipeline, generate_synthetic_dataset, Image, Mask, SampleMeta, SegSample,
    SyntheticSpec,
};
use ssseg::engine::{fit, load_model_weights, prepare_model, InferenceSpec, RunOptions};
use ssseg::evaluation::{compute_metrics, predict_sample, ConfusionMatrix, ModelPredictor};
use ssseg::optim::{lr_at as lr_at_impl, ScheduleSpec};
use ssseg::segmentors::Segmentor;
use ssseg_nn::ParamStore;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config_err(e: ConfigError) -> PyErr {
    value_err(e)
}

/// Hand a JSON value to Python through its `json` module.
fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (v.to_string(),))?.unbind())
}

/// Write a synthetic shapes dataset and return its descriptor.
#[pyfunction]
#[pyo3(signature = (out, seed=0, count=500, size=(64, 64), classes=4))]
fn gen_data(py: Python<'_>, out: PathBuf, seed: u64, count: usize, size: (usize, usize), classes: usize) -> PyResult<Py<PyAny>> {
    let spec = SyntheticSpec::new(seed, count, size, classes);
    let desc = generate_synthetic_dataset(&spec, &out).map_err(value_err)?;
    let meta = serde_json::json!({
        "root": out.display().to_string(),
        "num_classes": desc.num_classes,
        "class_names": desc.class_names,
        "train_images": desc.len(),
    });
    to_py(py, &meta)
}

/// Resolve a config file with its inherited bases and `key=value`
/// overrides.
#[pyfunction]
#[pyo3(signature = (path, overrides=Vec::new()))]
fn resolve_config(py: Python<'_>, path: PathBuf, overrides: Vec<String>) -> PyResult<Py<PyAny>> {
    let cfg = load_config(path, &overrides).map_err(config_err)?;
    to_py(py, cfg.as_value())
}

/// Train to `scheduler.max_iters`; returns the final metrics report.
#[pyfunction]
#[pyo3(signature = (config, work_dir, overrides=Vec::new(), resume=None))]
fn train(
    py: Python<'_>,
    config: PathBuf,
    work_dir: PathBuf,
    overrides: Vec<String>,
    resume: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config, &overrides).map_err(config_err)?;
    let art = py.detach(|| fit(&cfg, &RunOptions { work_dir, resume })).map_err(runtime_err)?;
    let report = std::fs::read_to_string(&art.report).map_err(runtime_err)?;
    to_py(py, &serde_json::from_str(&report).map_err(runtime_err)?)
}

/// `lr` at `iteration` of a poly schedule with optional linear warmup.
#[pyfunction]
#[pyo3(signature = (base_lr, max_iters, iteration, power=0.9, min_lr=0.0, warmup_iters=0, warmup_ratio=0.1))]
fn lr_at(
    base_lr: f64,
    max_iters: u64,
    iteration: u64,
    power: f64,
    min_lr: f64,
    warmup_iters: u64,
    warmup_ratio: f64,
) -> PyResult<f64> {
    let spec = ScheduleSpec { power, min_lr, warmup_iters, warmup_ratio, ..ScheduleSpec::poly(base_lr, max_iters) };
    lr_at_impl(&spec, iteration).map_err(value_err)
}

/// Metrics of one prediction against ground truth; both are `H×W` bytes.
#[pyfunction]
#[pyo3(signature = (pred, gt, num_classes, ignore_index=255))]
fn segmentation_metrics(py: Python<'_>, pred: &[u8], gt: &[u8], num_classes: usize, ignore_index: u8) -> PyResult<Py<PyAny>> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.update(pred, gt, ignore_index).map_err(value_err)?;
    let r = compute_metrics(&cm).map_err(value_err)?;
    to_py(py, &serde_json::to_value(&r).map_err(runtime_err)?)
}

/// A trained segmentor ready for inference.
#[pyclass(module = "ssseg_py")]
struct Model {
    segmentor: Segmentor,
    store: ParamStore,
    pipeline: Vec<Value>,
    inference: InferenceSpec,
    ignore_index: u8,
}

#[pymethods]
impl Model {
    /// Build from a config; weights come from `checkpoint` when given,
    /// otherwise from the seeded initialization.
    #[new]
    #[pyo3(signature = (config, checkpoint=None, overrides=Vec::new()))]
    fn new(config: PathBuf, checkpoint: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let cfg: Config = load_config(config, &overrides).map_err(config_err)?;
        let (section, desc, trainer) = prepare_model(&cfg).map_err(value_err)?;
        let mut store = trainer.state.store;
        if let Some(path) = checkpoint {
            load_model_weights(&mut store, &path).map_err(value_err)?;
        }
        Ok(Self {
            segmentor: trainer.segmentor,
            store,
            pipeline: section.test_pipeline,
            inference: trainer.runtime.inference,
            ignore_index: desc.ignore_index,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.segmentor.num_classes
    }

    /// Segment an `H×W×3` RGB image; returns `(labels, height, width)`.
    fn predict<'py>(&self, py: Python<'py>, rgb: &[u8], height: usize, width: usize) -> PyResult<(Bound<'py, PyBytes>, usize, usize)> {
        if rgb.len() != height * width * 3 {
            return Err(value_err(format!("expected {} bytes for {height}x{width} RGB, got {}", height * width * 3, rgb.len())));
        }
        let sample = SegSample {
            image: Image::new(height, width, rgb.iter().map(|&v| v as f32).collect()),
            mask: Mask::new(height, width, vec![self.ignore_index; height * width]),
            meta: SampleMeta {
                id: "input".into(),
                original_size: (height, width),
                current_size: (height, width),
                crop_offset: None,
                flipped: false,
            },
        };
        let pipeline = build_pipeline(&self.pipeline).map_err(value_err)?;
        let sample = apply_pipeline(sample, &pipeline, 0).map_err(value_err)?;
        let predictor = ModelPredictor { segmentor: &self.segmentor, store: &self.store };
        let labels = py
            .detach(|| predict_sample(&predictor, &sample, &self.inference, self.ignore_index))
            .map_err(runtime_err)?;
        Ok((PyBytes::new(py, &labels.data), labels.height, labels.width))
    }

    /// Names of the tensors a checkpoint holds.
    #[staticmethod]
    fn checkpoint_tensors(path: PathBuf) -> PyResult<Vec<String>> {
        let c = read_container(&path).map_err(value_err)?;
        Ok(c.tensors.into_iter().map(|(n, _)| n).collect())
    }
}

#[pymodule]
fn ssseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_metrics, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}

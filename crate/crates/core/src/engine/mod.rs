//! Training: the step, the dynamic loss-scaling protocol for half
//! precision, data-parallel gradient averaging and checkpointed state.
//!
//! Every source of randomness is derived from the run seed plus the
//! iteration and sample position, so a run is a pure function of its
//! config; resuming from a checkpoint continues the same stream.

mod run;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ssseg_nn::{Ctx, ForwardMode, Graph, ParamId, ParamStore, Tensor};
use thiserror::Error;

pub use run::{fit, load_model_weights, prepare_model, read_metric_log, strip_time, RunArtifacts, RunOptions};

use crate::checkpoint::{load_params, read_container, store_entries, write_container, CheckpointError};
use crate::config::Config;
use crate::datasets::{mix_seed, Batch, DatasetError, SamplerState};
use crate::error::ModelError;
use crate::losses::{loss_registry, segmentation_loss, LossSpec};
use crate::optim::{build_optimizer, lr_at, OptimError, Optimizer, ScheduleSpec};
use crate::segmentors::Segmentor;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite loss or gradient at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
    #[error("loss scale {scale} fell below the floor {floor}")]
    ScaleUnderflow { scale: f64, floor: f64 },
    #[error("replica parameters diverged at iteration {iteration} (checksums {checksums:?})")]
    DesyncDetected { iteration: u64, checksums: Vec<u64> },
    #[error("training already reached max_iters {0}")]
    Finished(u64),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EngineError>;

impl From<crate::config::ConfigError> for EngineError {
    fn from(e: crate::config::ConfigError) -> Self {
        EngineError::Config(e.to_string())
    }
}

impl From<ssseg_nn::TensorError> for EngineError {
    fn from(e: ssseg_nn::TensorError) -> Self {
        EngineError::Model(e.into())
    }
}

/// Dynamic loss scaling: start at 2^10; a non-finite gradient skips the
/// step and halves the scale; 2000 consecutive good steps double it, up
/// to 2^16. Falling below 2^-4 is fatal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub good_steps: u64,
}

impl LossScaler {
    pub const INITIAL: f64 = 1024.0;
    pub const MAX: f64 = 65536.0;
    pub const MIN: f64 = 0.0625;
    pub const GROWTH_INTERVAL: u64 = 2000;

    pub fn new() -> Self {
        Self { scale: Self::INITIAL, good_steps: 0 }
    }

    pub fn on_overflow(&mut self) -> Result<()> {
        self.scale /= 2.0;
        self.good_steps = 0;
        if self.scale < Self::MIN {
            return Err(EngineError::ScaleUnderflow { scale: self.scale, floor: Self::MIN });
        }
        Ok(())
    }

    pub fn on_good_step(&mut self) {
        self.good_steps += 1;
        if self.good_steps >= Self::GROWTH_INTERVAL {
            self.scale = (self.scale * 2.0).min(Self::MAX);
            self.good_steps = 0;
        }
    }
}

impl Default for LossScaler {
    fn default() -> Self {
        Self::new()
    }
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Iteration the step started from.
    pub iteration: u64,
    pub total_loss: f64,
    pub main_loss: f64,
    /// Unweighted auxiliary losses summed.
    pub aux_loss: f64,
    pub lr: f64,
    /// 1 in full precision.
    pub loss_scale: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    /// Wall-clock seconds.
    pub time: f64,
}

/// The `runtime` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    #[serde(default)]
    pub seed: u64,
    /// Accepted for interface compatibility; every kernel here is
    /// deterministic and data loading is order-preserving regardless.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub fp16: bool,
    /// Data-parallel replicas; the batch is sharded across them.
    #[serde(default = "one")]
    pub replicas: usize,
    /// Normalize with running statistics during training.
    #[serde(default)]
    pub frozen_norm: bool,
    /// Save a checkpoint every this many iterations (and always at the end).
    #[serde(default)]
    pub checkpoint_interval: Option<u64>,
    /// Evaluate on the val split every this many iterations (and at the end).
    #[serde(default)]
    pub eval_interval: Option<u64>,
    #[serde(default)]
    pub inference: InferenceSpec,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl Default for RuntimeSection {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields default")
    }
}

/// How images are segmented at test time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    #[serde(default)]
    pub mode: InferenceMode,
    #[serde(default)]
    pub window: Option<(usize, usize)>,
    #[serde(default)]
    pub stride: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    #[default]
    Whole,
    Slide,
}

impl RuntimeSection {
    pub fn parse(node: Option<&Value>) -> Result<Self> {
        let r: Self = serde_json::from_value(node.cloned().unwrap_or(json!({})))
            .map_err(|e| EngineError::Config(format!("runtime section: {e}")))?;
        if r.replicas == 0 {
            return Err(EngineError::Config("runtime.replicas must be at least 1".into()));
        }
        if r.checkpoint_interval == Some(0) || r.eval_interval == Some(0) {
            return Err(EngineError::Config("intervals must be positive".into()));
        }
        Ok(r)
    }
}

/// Everything that evolves during training and is persisted.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: Optimizer,
    pub iteration: u64,
    pub scaler: LossScaler,
    pub sampler: Option<SamplerState>,
    pub best_metric: Option<f64>,
    /// Evaluation records, oldest first.
    pub history: Vec<Value>,
}

/// A replica's private copy of the parameters and optimizer buffers.
#[derive(Clone, Debug)]
struct Replica {
    store: ParamStore,
    optimizer: Optimizer,
}

/// Gradients of one logical batch, before the update.
#[derive(Clone, Debug)]
pub struct GradOutput {
    /// Indexed by `ParamId`, already divided by the loss scale.
    pub grads: Vec<Option<Tensor>>,
    pub total_loss: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    /// Sum of CE normalizers over shards.
    pub normalizer: f64,
    /// Normalization statistics from the first replica.
    pub stat_updates: Vec<(ParamId, Tensor)>,
    pub started: Instant,
}

impl GradOutput {
    pub fn is_finite(&self) -> bool {
        self.total_loss.is_finite() && self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

struct ShardOut {
    grads: Vec<Option<Tensor>>,
    total: f64,
    main: f64,
    aux: f64,
    normalizer: f64,
    stats: Vec<(ParamId, Tensor)>,
}

#[derive(Debug)]
pub struct Trainer {
    pub segmentor: Segmentor,
    pub schedule: ScheduleSpec,
    pub loss: LossSpec,
    pub runtime: RuntimeSection,
    pub state: TrainState,
    replicas: Vec<Replica>,
}

impl Trainer {
    pub fn new(
        segmentor: Segmentor,
        store: ParamStore,
        optimizer: Optimizer,
        schedule: ScheduleSpec,
        loss: LossSpec,
        runtime: RuntimeSection,
    ) -> Result<Self> {
        loss.validate_for(segmentor.num_classes)?;
        let state = TrainState {
            store,
            optimizer,
            iteration: 0,
            scaler: LossScaler::new(),
            sampler: None,
            best_metric: None,
            history: Vec::new(),
        };
        let mut t = Self { segmentor, schedule, loss, runtime, state, replicas: Vec::new() };
        t.sync_replicas();
        Ok(t)
    }

    /// Model, loss, optimizer and schedule from a loaded config.
    pub fn from_config(cfg: &Config, num_classes: usize) -> Result<Self> {
        let runtime = RuntimeSection::parse(cfg.section("runtime"))?;
        let section = |name: &str| cfg.section(name).ok_or_else(|| EngineError::Config(format!("missing section `{name}`")));
        let (segmentor, store) = Segmentor::build(section("model")?, num_classes, runtime.seed)?;
        let loss = loss_registry().build(&mut (), section("loss")?).map_err(|e| EngineError::Config(e.to_string()))?;
        let (optimizer, schedule) = build_optimizer(section("optimizer")?, section("scheduler")?, &store)?;
        Self::new(segmentor, store, optimizer, schedule, loss, runtime)
    }

    pub fn max_iters(&self) -> u64 {
        self.schedule.max_iters
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.schedule.max_iters
    }

    fn sync_replicas(&mut self) {
        let n = self.runtime.replicas.saturating_sub(1);
        self.replicas = (0..n)
            .map(|_| Replica { store: self.state.store.clone(), optimizer: self.state.optimizer.clone() })
            .collect();
    }

    fn forward_mode(&self) -> ForwardMode {
        if self.runtime.frozen_norm {
            ForwardMode::TRAIN_FROZEN_NORM
        } else {
            ForwardMode::TRAIN
        }
    }

    /// Per-sample dropout seed for position `index` of the current batch.
    fn sample_seed(&self, index: usize) -> u64 {
        mix_seed(&[self.runtime.seed, 0xd40, self.state.iteration, index as u64])
    }

    fn shard_pass(&self, store: &ParamStore, shard: &Batch, offset: usize, scale: f64) -> Result<ShardOut> {
        let graph = if self.runtime.fp16 { Graph::half_precision() } else { Graph::new() };
        let seeds = (0..shard.len()).map(|i| self.sample_seed(offset + i)).collect();
        let cx = Ctx::new(&graph, store, self.forward_mode(), 0).with_sample_seeds(seeds);
        let x = graph.constant(shard.images.clone());
        let out = self.segmentor.forward(&cx, x, Some(&shard.masks))?;
        let (terms, ce) = segmentation_loss(out.main_logits, &out.aux_logits, &shard.masks, &self.loss)?;
        let root = if self.runtime.fp16 { terms.total.scale(scale as f32) } else { terms.total };
        let mut all = graph.backward(root);
        let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
        let inv = (1.0 / scale) as f32;
        for (id, leaf) in cx.param_leaves() {
            if !store.get(id).kind.is_trainable() {
                continue;
            }
            if let Some(mut g) = all.take(leaf) {
                if scale != 1.0 {
                    g.scale_in_place(inv);
                }
                grads[id.0] = Some(g);
            }
        }
        Ok(ShardOut {
            grads,
            total: terms.total.value().data()[0] as f64,
            main: terms.main,
            aux: terms.aux.iter().fold(0.0, |a, b| a + b),
            normalizer: ce.normalizer,
            stats: cx.take_stat_updates(),
        })
    }

    /// Forward and backward on `batch`, sharded over the replicas. Shard
    /// gradients are averaged with weights proportional to each shard's
    /// cross-entropy normalizer, which reproduces the gradient of the
    /// concatenated batch.
    pub fn compute_gradients(&self, batch: &Batch) -> Result<GradOutput> {
        let started = Instant::now();
        let r = self.runtime.replicas;
        if batch.len() < r {
            return Err(EngineError::Config(format!("batch of {} cannot feed {r} replicas", batch.len())));
        }
        let scale = if self.runtime.fp16 { self.state.scaler.scale } else { 1.0 };
        let outs: Vec<ShardOut> = if r == 1 {
            vec![self.shard_pass(&self.state.store, batch, 0, scale)?]
        } else {
            let shards = batch.shards(r);
            let mut offsets = Vec::with_capacity(r);
            let mut acc = 0;
            for s in &shards {
                offsets.push(acc);
                acc += s.len();
            }
            let stores: Vec<&ParamStore> =
                std::iter::once(&self.state.store).chain(self.replicas.iter().map(|rep| &rep.store)).collect();
            std::thread::scope(|scope| {
                let handles: Vec<_> = shards
                    .iter()
                    .zip(&offsets)
                    .zip(&stores)
                    .map(|((s, &o), &st)| scope.spawn(move || self.shard_pass(st, s, o, scale)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("replica panicked")).collect::<Result<Vec<_>>>()
            })?
        };
        Ok(combine_shards(outs, started))
    }

    /// Apply gradients at `lr_at(iteration)` and advance the iteration.
    pub fn apply_gradients(&mut self, mut out: GradOutput) -> Result<StepMetrics> {
        let it = self.state.iteration;
        if it >= self.schedule.max_iters {
            return Err(EngineError::Finished(self.schedule.max_iters));
        }
        let lr = lr_at(&self.schedule, it)?;
        let scale_used = if self.runtime.fp16 { self.state.scaler.scale } else { 1.0 };
        let mut metrics = StepMetrics {
            iteration: it,
            total_loss: out.total_loss,
            main_loss: out.main_loss,
            aux_loss: out.aux_loss,
            lr,
            loss_scale: scale_used,
            grad_norm: 0.0,
            skipped: false,
            time: 0.0,
        };
        if !out.is_finite() {
            if !self.runtime.fp16 {
                return Err(EngineError::NonFiniteLoss {
                    iteration: it,
                    detail: format!("total {}, main {}, aux {}", out.total_loss, out.main_loss, out.aux_loss),
                });
            }
            self.state.scaler.on_overflow()?;
            self.state.iteration += 1;
            metrics.skipped = true;
            metrics.grad_norm = f64::NAN;
            metrics.time = out.started.elapsed().as_secs_f64();
            return Ok(metrics);
        }
        metrics.grad_norm = self.state.optimizer.clip_gradients(&mut out.grads);
        self.state.optimizer.step(&mut self.state.store, &out.grads, lr)?;
        for rep in &mut self.replicas {
            rep.optimizer.step(&mut rep.store, &out.grads, lr)?;
        }
        for (id, t) in &out.stat_updates {
            for store in std::iter::once(&mut self.state.store).chain(self.replicas.iter_mut().map(|r| &mut r.store)) {
                store.set(*id, t.clone())?;
            }
        }
        if self.runtime.fp16 {
            self.state.scaler.on_good_step();
        }
        self.state.iteration += 1;
        if !self.replicas.is_empty() {
            let sums: Vec<u64> = std::iter::once(&self.state.store)
                .chain(self.replicas.iter().map(|r| &r.store))
                .map(ParamStore::checksum)
                .collect();
            if sums.iter().any(|&c| c != sums[0]) {
                return Err(EngineError::DesyncDetected { iteration: it, checksums: sums });
            }
        }
        metrics.time = out.started.elapsed().as_secs_f64();
        Ok(metrics)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let out = self.compute_gradients(batch)?;
        self.apply_gradients(out)
    }

    /// Parameters of replica `i` (0 is the primary).
    pub fn replica_store(&self, i: usize) -> &ParamStore {
        if i == 0 {
            &self.state.store
        } else {
            &self.replicas[i - 1].store
        }
    }

    /// Test hook: perturb one replica's parameters.
    #[doc(hidden)]
    pub fn replica_store_mut(&mut self, i: usize) -> &mut ParamStore {
        if i == 0 {
            &mut self.state.store
        } else {
            &mut self.replicas[i - 1].store
        }
    }

    /// Write the full train state; `config` is stored as the snapshot.
    pub fn save_checkpoint(&self, path: &Path, config: &Value) -> Result<()> {
        let s = &self.state;
        let meta = json!({
            "kind": "train_state",
            "config": config,
            "iteration": s.iteration,
            "scaler": s.scaler,
            "optimizer_steps": s.optimizer.state.steps,
            "sampler": s.sampler,
            "best_metric": s.best_metric,
            "history": s.history,
        });
        let optim = s.optimizer.state_entries(&s.store);
        let mut tensors = store_entries(&s.store);
        tensors.extend(optim.iter().map(|(n, t)| (n.as_str(), *t)));
        write_container(path, &meta, &tensors)?;
        Ok(())
    }

    /// Restore state written by [`Trainer::save_checkpoint`] into this
    /// (identically configured) trainer.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let c = read_container(path)?;
        let corrupt = |reason: &str| CheckpointError::CorruptFile { path: path.display().to_string(), reason: reason.into() };
        let meta = &c.meta;
        let (optim, params): (Vec<_>, Vec<_>) = c.tensors.into_iter().partition(|(n, _)| n.starts_with("optim."));
        let mut store = self.state.store.clone();
        load_params(&mut store, &params, true)?;
        let mut optimizer = self.state.optimizer.clone();
        let steps = meta["optimizer_steps"].as_u64().ok_or_else(|| corrupt("optimizer_steps"))?;
        optimizer.load_state(&store, steps, &optim)?;
        let iteration = meta["iteration"].as_u64().ok_or_else(|| corrupt("iteration"))?;
        if iteration > self.schedule.max_iters {
            return Err(EngineError::Config(format!(
                "checkpoint is at iteration {iteration} beyond max_iters {}",
                self.schedule.max_iters
            )));
        }
        let de = |key: &str| -> Result<Value> { Ok(meta.get(key).cloned().unwrap_or(Value::Null)) };
        let scaler: LossScaler = serde_json::from_value(de("scaler")?).map_err(|_| corrupt("scaler"))?;
        let sampler: Option<SamplerState> = serde_json::from_value(de("sampler")?).map_err(|_| corrupt("sampler"))?;
        let best_metric = meta["best_metric"].as_f64();
        let history = meta["history"].as_array().cloned().unwrap_or_default();
        self.state = TrainState { store, optimizer, iteration, scaler, sampler, best_metric, history };
        self.sync_replicas();
        Ok(())
    }
}

fn combine_shards(outs: Vec<ShardOut>, started: Instant) -> GradOutput {
    let norm: f64 = outs.iter().map(|o| o.normalizer).sum();
    let n = outs.len();
    let weights: Vec<f64> =
        if norm > 0.0 { outs.iter().map(|o| o.normalizer / norm).collect() } else { vec![1.0 / n as f64; n] };
    let wsum = |f: fn(&ShardOut) -> f64| outs.iter().zip(&weights).fold(0.0, |a, (o, w)| a + w * f(o));
    let (total, main, aux) = if n == 1 { (outs[0].total, outs[0].main, outs[0].aux) } else { (wsum(|o| o.total), wsum(|o| o.main), wsum(|o| o.aux)) };
    let mut outs = outs;
    let stats = std::mem::take(&mut outs[0].stats);
    let grads = if n == 1 {
        std::mem::take(&mut outs[0].grads)
    } else {
        let len = outs[0].grads.len();
        (0..len)
            .map(|i| {
                let mut acc: Option<Tensor> = None;
                for (o, &w) in outs.iter().zip(&weights) {
                    if let Some(g) = &o.grads[i] {
                        let g = g.map(|v| (v as f64 * w) as f32);
                        match &mut acc {
                            Some(a) => a.add_assign(&g),
                            None => acc = Some(g),
                        }
                    }
                }
                acc
            })
            .collect()
    };
    GradOutput { grads, total_loss: total, main_loss: main, aux_loss: aux, normalizer: norm, stat_updates: stats, started }
}

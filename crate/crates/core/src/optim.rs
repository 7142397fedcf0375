//! Parameter groups, update rules and the poly learning-rate schedule.
//!
//! Momentum SGD: `v ← m·v + g; p ← p − lr·(v + wd·p)`.
//! AdamW: bias-corrected moments, `p ← p − lr·(m̂/(sqrt(v̂)+ε) + wd·p)`.
//! `lr` and `wd` are the group-resolved values: `lr_at(t)·lr_mult` and
//! `weight_decay·weight_decay_mult`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ssseg_nn::{ParamId, ParamKind, ParamStore, Tensor};
use thiserror::Error;

use crate::registry::{parse_params, Category, Registry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("iteration {iter} outside 0..={max_iters}")]
    IterOutOfRange { iter: u64, max_iters: u64 },
    #[error("optimizer config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Poly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub policy: Policy,
    pub base_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    pub max_iters: u64,
    #[serde(default)]
    pub warmup_iters: u64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
}

fn default_power() -> f64 {
    0.9
}

fn default_warmup_ratio() -> f64 {
    0.1
}

impl ScheduleSpec {
    pub fn poly(base_lr: f64, max_iters: u64) -> Self {
        Self {
            policy: Policy::Poly,
            base_lr,
            min_lr: 0.0,
            power: 0.9,
            max_iters,
            warmup_iters: 0,
            warmup_ratio: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(0.0 <= self.min_lr && self.min_lr <= self.base_lr) {
            return bad(format!("need 0 <= min_lr ({}) <= base_lr ({})", self.min_lr, self.base_lr));
        }
        if !(self.power > 0.0) {
            return bad(format!("power {} must be positive", self.power));
        }
        if self.max_iters == 0 || self.warmup_iters >= self.max_iters {
            return bad(format!("need warmup_iters ({}) < max_iters ({})", self.warmup_iters, self.max_iters));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} not in [0, 1]", self.warmup_ratio));
        }
        Ok(())
    }
}

/// Learning rate at iteration `iter` (the lr used by the update that moves
/// the state from `iter` to `iter + 1`).
pub fn lr_at(spec: &ScheduleSpec, iter: u64) -> Result<f64> {
    if iter > spec.max_iters {
        return Err(OptimError::IterOutOfRange { iter, max_iters: spec.max_iters });
    }
    if iter < spec.warmup_iters {
        let start = spec.warmup_ratio * spec.base_lr;
        return Ok(start + (spec.base_lr - start) * iter as f64 / spec.warmup_iters as f64);
    }
    let span = (spec.max_iters - spec.warmup_iters) as f64;
    let f = (1.0 - (iter - spec.warmup_iters) as f64 / span).powf(spec.power);
    // a convex combination hits base_lr and min_lr exactly at the ends
    Ok(spec.base_lr * f + spec.min_lr * (1.0 - f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Backbone,
    Head,
    Norm,
    Bias,
}

impl Selector {
    /// Resolution order: the attribute selectors win over the component ones.
    const PRIORITY: [Selector; 4] = [Selector::Norm, Selector::Bias, Selector::Backbone, Selector::Head];

    pub fn matches(self, name: &str, kind: ParamKind) -> bool {
        match self {
            Selector::Norm => kind.is_norm(),
            Selector::Bias => kind == ParamKind::Bias,
            Selector::Backbone => name.starts_with("backbone."),
            Selector::Head => name.starts_with("head.") || name.starts_with("aux_head."),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGroupSpec {
    pub selector: Selector,
    #[serde(default = "one")]
    pub lr_mult: f64,
    /// Defaults to 0 for `norm` and `bias`, 1 otherwise.
    #[serde(default)]
    pub weight_decay_mult: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl ParamGroupSpec {
    pub fn new(selector: Selector) -> Self {
        Self { selector, lr_mult: 1.0, weight_decay_mult: None }
    }

    pub fn resolved_wd_mult(&self) -> f64 {
        self.weight_decay_mult.unwrap_or(match self.selector {
            Selector::Norm | Selector::Bias => 0.0,
            Selector::Backbone | Selector::Head => 1.0,
        })
    }
}

fn default_groups() -> Vec<ParamGroupSpec> {
    Selector::PRIORITY.iter().map(|&s| ParamGroupSpec::new(s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// The `optimizer` config section minus its `type`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerParams {
    #[serde(alias = "lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_groups")]
    pub groups: Vec<ParamGroupSpec>,
    /// Clip gradients to this global L2 norm; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub rule: Rule,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub groups: Vec<ParamGroupSpec>,
    pub grad_clip: Option<f64>,
}

impl OptimizerSpec {
    pub fn sgd(base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { rule: Rule::Sgd { momentum }, base_lr, weight_decay, groups: default_groups(), grad_clip: None }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be non-negative", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        match self.rule {
            Rule::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => bad(format!("momentum {momentum} not in [0, 1)")),
            Rule::AdamW { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                bad(format!("adamw betas ({beta1}, {beta2}) / eps {eps} invalid"))
            }
            _ => Ok(()),
        }?;
        for (i, g) in self.groups.iter().enumerate() {
            if self.groups[..i].iter().any(|o| o.selector == g.selector) {
                return bad(format!("selector {:?} listed twice", g.selector));
            }
            if !(g.lr_mult >= 0.0 && g.resolved_wd_mult() >= 0.0) {
                return bad(format!("negative multiplier in group {:?}", g.selector));
            }
        }
        Ok(())
    }
}

pub type OptimizerRegistry = Registry<(), OptimizerSpec>;

pub fn optimizer_registry() -> OptimizerRegistry {
    fn from(p: OptimizerParams, rule: Rule) -> Result<OptimizerSpec> {
        let spec = OptimizerSpec {
            rule,
            base_lr: p.base_lr,
            weight_decay: p.weight_decay,
            groups: p.groups,
            grad_clip: p.grad_clip,
        };
        spec.validate()?;
        Ok(spec)
    }
    let mut r = Registry::new(Category::Optimizer);
    r.register("sgd", |_, p| {
        let p: OptimizerParams = parse_params(p)?;
        let m = p.momentum;
        Ok(from(p, Rule::Sgd { momentum: m })?)
    })
    .unwrap();
    r.register("adamw", |_, p| {
        let p: OptimizerParams = parse_params(p)?;
        let rule = Rule::AdamW { beta1: p.beta1, beta2: p.beta2, eps: p.eps };
        Ok(from(p, rule)?)
    })
    .unwrap();
    r
}

/// The `scheduler` section; `base_lr` comes from the optimizer.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerParams {
    pub max_iters: u64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub warmup_iters: u64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
}

pub type SchedulerRegistry = Registry<f64, ScheduleSpec>;

/// Context is the optimizer's base learning rate.
pub fn scheduler_registry() -> SchedulerRegistry {
    let mut r = Registry::new(Category::Scheduler);
    r.register("poly", |base_lr: &mut f64, p| {
        let p: SchedulerParams = parse_params(p)?;
        let spec = ScheduleSpec {
            policy: Policy::Poly,
            base_lr: *base_lr,
            min_lr: p.min_lr,
            power: p.power,
            max_iters: p.max_iters,
            warmup_iters: p.warmup_iters,
            warmup_ratio: p.warmup_ratio,
        };
        spec.validate()?;
        Ok(spec)
    })
    .unwrap();
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedGroup {
    pub selector: Selector,
    pub lr_mult: f64,
    pub weight_decay: f64,
    pub params: Vec<ParamId>,
}

/// Per-parameter buffers. Indexed by `ParamId`; `None` until first used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub first: Vec<Option<Tensor>>,
    pub second: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub spec: OptimizerSpec,
    pub groups: Vec<ResolvedGroup>,
    pub state: OptimizerState,
}

impl Optimizer {
    /// Partition the trainable parameters of `store` into groups. A
    /// parameter goes to the first configured selector that matches it in
    /// the order norm, bias, backbone, head.
    pub fn new(spec: OptimizerSpec, store: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let mut groups: Vec<ResolvedGroup> = spec
            .groups
            .iter()
            .map(|g| ResolvedGroup {
                selector: g.selector,
                lr_mult: g.lr_mult,
                weight_decay: spec.weight_decay * g.resolved_wd_mult(),
                params: Vec::new(),
            })
            .collect();
        let mut unmatched = Vec::new();
        for (id, p) in store.trainable() {
            let hit = Selector::PRIORITY
                .iter()
                .filter(|s| s.matches(&p.name, p.kind))
                .find_map(|s| groups.iter().position(|g| g.selector == *s));
            match hit {
                Some(g) => groups[g].params.push(id),
                None => unmatched.push(p.name.clone()),
            }
        }
        if !unmatched.is_empty() {
            return Err(OptimError::Config(format!("parameters match no group: {}", unmatched.join(", "))));
        }
        let n = store.len();
        let state = OptimizerState { steps: 0, first: vec![None; n], second: vec![None; n] };
        Ok(Self { spec, groups, state })
    }

    pub fn group_of(&self, id: ParamId) -> Option<&ResolvedGroup> {
        self.groups.iter().find(|g| g.params.contains(&id))
    }

    /// Scale `grads` in place so their global L2 norm is at most
    /// `grad_clip`. Returns the norm before clipping.
    pub fn clip_gradients(&self, grads: &mut [Option<Tensor>]) -> f64 {
        let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if let Some(max) = self.spec.grad_clip {
            if norm > max {
                let s = (max / (norm + 1e-6)) as f32;
                grads.iter_mut().flatten().for_each(|g| g.scale_in_place(s));
            }
        }
        norm
    }

    /// One update at schedule learning rate `lr`. `grads` is indexed by
    /// `ParamId`; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.state.steps += 1;
        let t = self.state.steps;
        for g in &self.groups {
            let lr = lr * g.lr_mult;
            let wd = g.weight_decay;
            for &id in &g.params {
                let shape = store.value(id).shape().to_vec();
                let zero;
                let grad = match grads.get(id.0).and_then(Option::as_ref) {
                    Some(gr) => gr,
                    None => {
                        zero = Tensor::zeros(&shape);
                        &zero
                    }
                };
                let p = store.value_mut(id);
                match self.spec.rule {
                    Rule::Sgd { momentum } => {
                        let v = self.state.first[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
                        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                            let nv = momentum * *vv as f64 + gv as f64;
                            *vv = nv as f32;
                            *pv = (*pv as f64 - lr * (nv + wd * *pv as f64)) as f32;
                        }
                    }
                    Rule::AdamW { beta1, beta2, eps } => {
                        let m = self.state.first[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
                        let v = self.state.second[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
                        let c1 = 1.0 - beta1.powi(t as i32);
                        let c2 = 1.0 - beta2.powi(t as i32);
                        for (((pv, mv), vv), &gv) in
                            p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data())
                        {
                            let g = gv as f64;
                            let nm = beta1 * *mv as f64 + (1.0 - beta1) * g;
                            let nv = beta2 * *vv as f64 + (1.0 - beta2) * g * g;
                            *mv = nm as f32;
                            *vv = nv as f32;
                            let upd = (nm / c1) / ((nv / c2).sqrt() + eps);
                            *pv = (*pv as f64 - lr * (upd + wd * *pv as f64)) as f32;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Buffers as named tensors for checkpoints: `optim.first.<param>` and
    /// `optim.second.<param>`.
    pub fn state_entries<'a>(&'a self, store: &'a ParamStore) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (slot, bufs) in [("first", &self.state.first), ("second", &self.state.second)] {
            for (i, b) in bufs.iter().enumerate() {
                if let Some(t) = b {
                    out.push((format!("optim.{slot}.{}", store.get(ParamId(i)).name), t));
                }
            }
        }
        out
    }

    /// Restore buffers written by [`Optimizer::state_entries`].
    pub fn load_state(&mut self, store: &ParamStore, steps: u64, entries: &[(String, Tensor)]) -> Result<()> {
        let n = store.len();
        let mut state = OptimizerState { steps, first: vec![None; n], second: vec![None; n] };
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix("optim.") else { continue };
            let (slot, pname) = rest
                .split_once('.')
                .ok_or_else(|| OptimError::Config(format!("bad optimizer entry `{name}`")))?;
            let id = store
                .find(pname)
                .ok_or_else(|| OptimError::Config(format!("optimizer entry for unknown parameter `{pname}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(OptimError::Config(format!("optimizer entry `{name}` has shape {:?}", t.shape())));
            }
            match slot {
                "first" => state.first[id.0] = Some(t.clone()),
                "second" => state.second[id.0] = Some(t.clone()),
                _ => return Err(OptimError::Config(format!("bad optimizer entry `{name}`"))),
            }
        }
        self.state = state;
        Ok(())
    }
}

/// Build optimizer and schedule from the two config sections.
pub fn build_optimizer(optimizer: &Value, scheduler: &Value, store: &ParamStore) -> Result<(Optimizer, ScheduleSpec)> {
    let spec = optimizer_registry().build(&mut (), optimizer).map_err(|e| OptimError::Config(e.to_string()))?;
    let mut base_lr = spec.base_lr;
    let schedule = scheduler_registry().build(&mut base_lr, scheduler).map_err(|e| OptimError::Config(e.to_string()))?;
    Ok((Optimizer::new(spec, store)?, schedule))
}

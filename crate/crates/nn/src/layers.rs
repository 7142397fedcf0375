//! Parameterized building blocks and the forward-pass context.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::ops::conv::Conv2dArgs;
use crate::params::{ConvInit, ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Which statistics batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    /// Statistics of the current batch; running averages are updated.
    Batch,
    /// Stored running statistics; nothing is updated.
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Dropout active and parameters differentiable.
    pub train: bool,
    pub norm: NormStats,
}

impl ForwardMode {
    pub const TRAIN: Self = Self { train: true, norm: NormStats::Batch };
    pub const EVAL: Self = Self { train: false, norm: NormStats::Running };
    /// Training with frozen normalization statistics.
    pub const TRAIN_FROZEN_NORM: Self = Self { train: true, norm: NormStats::Running };
}

/// Everything a module needs during one forward pass.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub store: &'g ParamStore,
    pub mode: ForwardMode,
    dropout_seed: u64,
    sample_seeds: Option<Vec<u64>>,
    dropout_calls: Cell<u64>,
    param_vars: RefCell<Vec<Option<Var<'g>>>>,
    stat_updates: RefCell<Vec<(ParamId, Tensor)>>,
    internals: Option<RefCell<Vec<(String, Arc<Tensor>)>>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, mode: ForwardMode, dropout_seed: u64) -> Self {
        Self {
            graph,
            store,
            mode,
            dropout_seed,
            sample_seeds: None,
            dropout_calls: Cell::new(0),
            param_vars: RefCell::new(vec![None; store.len()]),
            stat_updates: RefCell::new(Vec::new()),
            internals: None,
        }
    }

    /// Collect named intermediate maps during the pass.
    pub fn with_internals(mut self) -> Self {
        self.internals = Some(RefCell::new(Vec::new()));
        self
    }

    /// Per-sample dropout seeds. A sample's masks then depend only on its
    /// own seed, so a batch split into shards sees the same masks as the
    /// whole batch.
    pub fn with_sample_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.sample_seeds = Some(seeds);
        self
    }

    /// The graph leaf for a parameter; one leaf per parameter per pass.
    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.param_vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf_shared(p.value.clone(), self.mode.train && p.kind.is_trainable());
        self.param_vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Parameter leaves created so far, for gradient collection.
    pub fn param_leaves(&self) -> Vec<(ParamId, Var<'g>)> {
        self.param_vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn dropout(&self, x: Var<'g>, p: f32) -> Result<Var<'g>> {
        if !self.mode.train || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(crate::TensorError::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let call = self.dropout_calls.get();
        self.dropout_calls.set(call + 1);
        let shape = x.shape();
        let n = shape[0];
        let per = x.value().numel() / n.max(1);
        let keep = 1.0 / (1.0 - p);
        let mut mask = Vec::with_capacity(n * per);
        for i in 0..n {
            let seed = match &self.sample_seeds {
                Some(s) => *s.get(i).ok_or_else(|| {
                    crate::TensorError::Shape(format!("{} sample seeds for batch of {n}", s.len()))
                })?,
                None => self.dropout_seed ^ (i as u64).wrapping_mul(0xd6e8_feb8_6659_fd93),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (call + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            mask.extend((0..per).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }));
        }
        x.mul_const(Arc::new(Tensor::from_vec(&shape, mask)?))
    }

    pub fn push_stat_update(&self, id: ParamId, value: Tensor) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    pub fn record_internal(&self, name: &str, x: Var<'g>) {
        if let Some(internals) = &self.internals {
            internals.borrow_mut().push((name.to_string(), x.value()));
        }
    }

    pub fn take_internals(&self) -> Vec<(String, Arc<Tensor>)> {
        self.internals.as_ref().map(|i| std::mem::take(&mut *i.borrow_mut())).unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub args: Conv2dArgs,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        args: Conv2dArgs,
        bias: bool,
        init: ConvInit,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            let weight = pb.conv_weight("weight", [out_channels, in_channels, kernel, kernel], init)?;
            let bias = if bias { Some(pb.add("bias", ParamKind::Bias, Tensor::zeros(&[out_channels]))?) } else { None };
            Ok(Self { weight, bias, args, in_channels, out_channels, kernel })
        })
    }

    /// `kernel`×`kernel` convolution with "same" padding for stride 1.
    pub fn same(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        let args = Conv2dArgs { stride: 1, padding: dilation * (kernel - 1) / 2, dilation };
        Self::new(pb, name, in_channels, out_channels, kernel, args, bias, ConvInit::KaimingFanOut)
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let bias = self.bias.map(|b| cx.param(b));
        x.conv2d(cx.param(self.weight), bias, self.args)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Self::with_gain(pb, name, channels, 1.0)
    }

    pub fn with_gain(pb: &mut ParamBuilder, name: &str, channels: usize, gain: f32) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.add("weight", ParamKind::NormWeight, Tensor::full(&[channels], gain))?,
                bias: pb.add("bias", ParamKind::NormBias, Tensor::zeros(&[channels]))?,
                running_mean: pb.add("running_mean", ParamKind::RunningStat, Tensor::zeros(&[channels]))?,
                running_var: pb.add("running_var", ParamKind::RunningStat, Tensor::ones(&[channels]))?,
                channels,
                eps: 1e-5,
                momentum: 0.1,
            })
        })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let (gamma, beta) = (cx.param(self.weight), cx.param(self.bias));
        match cx.mode.norm {
            NormStats::Batch => {
                let (y, stats) = x.batch_norm_train(gamma, beta, self.eps)?;
                let m = self.momentum;
                let blend = |old: &Tensor, new: &Tensor| old.zip_map(new, |o, n| (1.0 - m) * o + m * n);
                cx.push_stat_update(self.running_mean, blend(cx.store.value(self.running_mean), &stats.mean)?);
                cx.push_stat_update(self.running_var, blend(cx.store.value(self.running_var), &stats.var)?);
                Ok(y)
            }
            NormStats::Running => x.batch_norm_eval(
                gamma,
                beta,
                cx.store.value(self.running_mean),
                cx.store.value(self.running_var),
                self.eps,
            ),
        }
    }

    /// Trainable parameter count (gain and shift).
    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Convolution without bias, batch norm, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBnAct {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        args: Conv2dArgs,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            let conv = Conv2d::new(pb, "conv", in_channels, out_channels, kernel, args, false, ConvInit::KaimingFanOut)?;
            let bn = BatchNorm2d::new(pb, "bn", out_channels)?;
            Ok(Self { conv, bn, relu: true })
        })
    }

    /// Stride-1 block with padding that keeps the spatial size.
    pub fn same(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let args = Conv2dArgs { stride: 1, padding: dilation * (kernel - 1) / 2, dilation };
        Self::new(pb, name, in_channels, out_channels, kernel, args)
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.bn.forward(cx, self.conv.forward(cx, x)?)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

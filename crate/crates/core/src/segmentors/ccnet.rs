use std::sync::Arc;

use serde::Deserialize;
use ssseg_nn::{cat, Conv2d, Conv2dArgs, ConvBnAct, ConvInit, Ctx, ParamBuilder, ParamId, ParamKind, Tensor, Var};

use super::{default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs};
use crate::error::{ModelError, ModelResult};

/// Criss-cross attention. Each position `(i, j)` attends over the `h + w - 1`
/// positions of its row and column (itself once), with query/key width
/// `max(C/8, 1)`. The unit is applied `recurrence` times with shared
/// parameters, each time as `x + γ · attention`, `γ` starting at 0.
#[derive(Debug)]
pub struct CrissCrossAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: ParamId,
    pub qk_channels: usize,
}

impl CrissCrossAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> ModelResult<Self> {
        let qk = (channels / 8).max(1);
        let a = Conv2dArgs::default();
        let init = ConvInit::KaimingFanOut;
        pb.scoped(name, |pb| {
            Ok(Self {
                query: Conv2d::new(pb, "query", channels, qk, 1, a, true, init)?,
                key: Conv2d::new(pb, "key", channels, qk, 1, a, true, init)?,
                value: Conv2d::new(pb, "value", channels, channels, 1, a, true, init)?,
                gamma: pb.add("gamma", ParamKind::Weight, Tensor::zeros(&[1]))?,
                qk_channels: qk,
            })
        })
    }

    /// One application of the unit.
    pub fn step<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let cq = self.qk_channels;
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;

        // energies along the row: query (i, j), key (i, j')
        let q_row = q.permute(&[0, 2, 3, 1])?.reshape(&[n * h, w, cq])?;
        let k_row = k.permute(&[0, 2, 1, 3])?.reshape(&[n * h, cq, w])?;
        let e_row = q_row.bmm(k_row)?.reshape(&[n, h, w, w])?;
        // energies along the column: query (i, j), key (i', j); self masked
        let q_col = q.permute(&[0, 3, 2, 1])?.reshape(&[n * w, h, cq])?;
        let k_col = k.permute(&[0, 3, 1, 2])?.reshape(&[n * w, cq, h])?;
        let mut mask = Tensor::zeros(&[n * w, h, h]);
        for (idx, m) in mask.data_mut().iter_mut().enumerate() {
            if idx % (h * h) / h == idx % h {
                *m = f32::NEG_INFINITY;
            }
        }
        let e_col = q_col.bmm(k_col)?.add_const(Arc::new(mask))?.reshape(&[n, w, h, h])?.permute(&[0, 2, 1, 3])?;

        let attn = cat(&[e_col, e_row], 3)?.softmax_last();
        cx.record_internal("cca.attention", attn);
        let a_col = attn.narrow(3, 0, h)?.permute(&[0, 2, 1, 3])?.reshape(&[n * w, h, h])?;
        let a_row = attn.narrow(3, h, w)?.reshape(&[n * h, w, w])?;

        let v_row = v.permute(&[0, 2, 3, 1])?.reshape(&[n * h, w, c])?;
        let out_row = a_row.bmm(v_row)?.reshape(&[n, h, w, c])?;
        let v_col = v.permute(&[0, 3, 2, 1])?.reshape(&[n * w, h, c])?;
        let out_col = a_col.bmm(v_col)?.reshape(&[n, w, h, c])?.permute(&[0, 2, 1, 3])?;
        let out = out_row.add(out_col)?.permute(&[0, 3, 1, 2])?;
        Ok(x.add(out.mul_scalar(cx.param(self.gamma))?)?)
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, mut x: Var<'g>, recurrence: usize) -> ModelResult<Var<'g>> {
        for _ in 0..recurrence {
            x = self.step(cx, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    #[serde(default = "default_recurrence")]
    pub recurrence: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_mid() -> usize {
    512
}

fn default_recurrence() -> usize {
    2
}

/// 3×3 reduction, recurrent criss-cross attention, 3×3 conv, classifier.
#[derive(Debug)]
pub struct CcHead {
    pub in_index: usize,
    pub recurrence: usize,
    pub reduce: ConvBnAct,
    pub cca: CrissCrossAttention,
    pub post: ConvBnAct,
    pub cls: Classifier,
}

impl CcHead {
    pub fn new(cx: &mut HeadContext, spec: CcSpec) -> ModelResult<Self> {
        if spec.recurrence == 0 {
            return Err(ModelError::InvalidSpec("recurrence must be at least 1".into()));
        }
        let (in_index, info) = cx.level(spec.in_index)?;
        let (mid, k) = (spec.mid_channels, cx.num_classes);
        cx.pb.scoped("head", |pb| {
            Ok(Self {
                in_index,
                recurrence: spec.recurrence,
                reduce: ConvBnAct::same(pb, "reduce", info.channels, mid, 3, 1)?,
                cca: CrissCrossAttention::new(pb, "cca", mid)?,
                post: ConvBnAct::same(pb, "post", mid, mid, 3, 1)?,
                cls: Classifier::new(pb, mid, k, spec.dropout)?,
            })
        })
    }
}

impl DecodeHead for CcHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let x = self.reduce.forward(cx, inputs.feats.level(self.in_index)?.map)?;
        let y = self.post.forward(cx, self.cca.forward(cx, x, self.recurrence)?)?;
        self.cls.forward(cx, y)
    }
}

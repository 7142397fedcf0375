use serde::Deserialize;
use ssseg_nn::{Conv2d, Conv2dArgs, ConvBnAct, ConvInit, Ctx, ParamBuilder, Var};

use super::{default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs};
use crate::error::ModelResult;

/// Embedded-Gaussian non-local block:
/// `y = x + W_z · softmax(θx (φx)ᵀ / sqrt(inner)) · g x`, softmax over key
/// positions. θ, φ, g and `W_z` are 1×1 convolutions with bias; `W_z`
/// starts at zero so a fresh block is the identity.
#[derive(Debug)]
pub struct NonLocalBlock {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub g: Conv2d,
    pub out: Conv2d,
    pub inner: usize,
}

impl NonLocalBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, zero_init_out: bool) -> ModelResult<Self> {
        let inner = (channels / 2).max(1);
        let a = Conv2dArgs::default();
        let small = ConvInit::Normal(0.01);
        pb.scoped(name, |pb| {
            Ok(Self {
                theta: Conv2d::new(pb, "theta", channels, inner, 1, a, true, small)?,
                phi: Conv2d::new(pb, "phi", channels, inner, 1, a, true, small)?,
                g: Conv2d::new(pb, "g", channels, inner, 1, a, true, small)?,
                out: Conv2d::new(
                    pb,
                    "out",
                    inner,
                    channels,
                    1,
                    a,
                    true,
                    if zero_init_out { ConvInit::Zeros } else { small },
                )?,
                inner,
            })
        })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let (i, hw) = (self.inner, h * w);
        let theta = self.theta.forward(cx, x)?.reshape(&[n, i, hw])?.permute(&[0, 2, 1])?;
        let phi = self.phi.forward(cx, x)?.reshape(&[n, i, hw])?;
        let g = self.g.forward(cx, x)?.reshape(&[n, i, hw])?.permute(&[0, 2, 1])?;
        let attn = theta.bmm(phi)?.scale(1.0 / (i as f32).sqrt()).softmax_last();
        cx.record_internal("nonlocal.attention", attn);
        let y = attn.bmm(g)?.permute(&[0, 2, 1])?.reshape(&[n, i, h, w])?;
        Ok(x.add(self.out.forward(cx, y)?)?)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonLocalSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    #[serde(default = "yes")]
    pub zero_init_out: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_mid() -> usize {
    512
}

fn yes() -> bool {
    true
}

/// 3×3 reduction, non-local block, 3×3 conv, classifier.
#[derive(Debug)]
pub struct NonLocalHead {
    pub in_index: usize,
    pub reduce: ConvBnAct,
    pub block: NonLocalBlock,
    pub post: ConvBnAct,
    pub cls: Classifier,
}

impl NonLocalHead {
    pub fn new(cx: &mut HeadContext, spec: NonLocalSpec) -> ModelResult<Self> {
        let (in_index, info) = cx.level(spec.in_index)?;
        let (mid, k) = (spec.mid_channels, cx.num_classes);
        cx.pb.scoped("head", |pb| {
            Ok(Self {
                in_index,
                reduce: ConvBnAct::same(pb, "reduce", info.channels, mid, 3, 1)?,
                block: NonLocalBlock::new(pb, "nonlocal", mid, spec.zero_init_out)?,
                post: ConvBnAct::same(pb, "post", mid, mid, 3, 1)?,
                cls: Classifier::new(pb, mid, k, spec.dropout)?,
            })
        })
    }
}

impl DecodeHead for NonLocalHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let x = self.reduce.forward(cx, inputs.feats.level(self.in_index)?.map)?;
        let y = self.post.forward(cx, self.block.forward(cx, x)?)?;
        self.cls.forward(cx, y)
    }
}

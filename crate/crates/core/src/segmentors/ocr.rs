use serde::Deserialize;
use ssseg_nn::{cat, ConvBnAct, Ctx, ParamBuilder, Var};

use super::{default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs};
use crate::error::{ModelError, ModelResult};

/// Soft object regions: `region[n,k,:] = Σ_p softmax_p(logits[n,k,p]) · feats[n,:,p]`,
/// the softmax taken over spatial positions. Returns `N×K×C`.
pub fn spatial_gather<'g>(feats: Var<'g>, region_logits: Var<'g>) -> ModelResult<Var<'g>> {
    let fs = feats.shape();
    let ls = region_logits.shape();
    if fs.len() != 4 || ls.len() != 4 || fs[0] != ls[0] || fs[2..] != ls[2..] {
        return Err(ModelError::Config(format!("spatial_gather: feats {fs:?} and logits {ls:?} disagree")));
    }
    let (n, c, hw, k) = (fs[0], fs[1], fs[2] * fs[3], ls[1]);
    let probs = region_logits.reshape(&[n, k, hw])?.softmax_last();
    let f = feats.reshape(&[n, c, hw])?.permute(&[0, 2, 1])?;
    Ok(probs.bmm(f)?)
}

/// Pixel-region relation: pixels query the `K` region descriptors through
/// two-layer 1×1 transforms, softmax over regions scaled by
/// `1/sqrt(key_channels)`, and the attended context is fused with the
/// pixel features by a 1×1 conv over their concatenation.
#[derive(Debug)]
pub struct ObjectAttention {
    pub f_pixel: [ConvBnAct; 2],
    pub f_object: [ConvBnAct; 2],
    pub f_down: ConvBnAct,
    pub f_up: ConvBnAct,
    pub fuse: ConvBnAct,
    pub key_channels: usize,
}

impl ObjectAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, key_channels: usize) -> ModelResult<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                f_pixel: [
                    ConvBnAct::same(pb, "f_pixel.0", channels, key_channels, 1, 1)?,
                    ConvBnAct::same(pb, "f_pixel.1", key_channels, key_channels, 1, 1)?,
                ],
                f_object: [
                    ConvBnAct::same(pb, "f_object.0", channels, key_channels, 1, 1)?,
                    ConvBnAct::same(pb, "f_object.1", key_channels, key_channels, 1, 1)?,
                ],
                f_down: ConvBnAct::same(pb, "f_down", channels, key_channels, 1, 1)?,
                f_up: ConvBnAct::same(pb, "f_up", key_channels, channels, 1, 1)?,
                fuse: ConvBnAct::same(pb, "fuse", 2 * channels, channels, 1, 1)?,
                key_channels,
            })
        })
    }

    /// `feats` is `N×C×h×w`, `regions` is `N×K×C`.
    pub fn forward<'g>(&self, cx: &Ctx<'g>, feats: Var<'g>, regions: Var<'g>) -> ModelResult<Var<'g>> {
        let s = feats.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let k = regions.shape()[1];
        let kc = self.key_channels;
        let regions = regions.permute(&[0, 2, 1])?.reshape(&[n, c, k, 1])?;

        let q = self.f_pixel[1].forward(cx, self.f_pixel[0].forward(cx, feats)?)?;
        let q = q.reshape(&[n, kc, h * w])?.permute(&[0, 2, 1])?;
        let key = self.f_object[1].forward(cx, self.f_object[0].forward(cx, regions)?)?.reshape(&[n, kc, k])?;
        let value = self.f_down.forward(cx, regions)?.reshape(&[n, kc, k])?.permute(&[0, 2, 1])?;

        let sim = q.bmm(key)?.scale(1.0 / (kc as f32).sqrt()).softmax_last();
        cx.record_internal("ocr.object_attention", sim);
        let context = sim.bmm(value)?.permute(&[0, 2, 1])?.reshape(&[n, kc, h, w])?;
        let context = self.f_up.forward(cx, context)?;
        Ok(self.fuse.forward(cx, cat(&[context, feats], 1)?)?)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    /// Defaults to half of `mid_channels`.
    #[serde(default)]
    pub key_channels: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_mid() -> usize {
    512
}

/// 3×3 bottleneck, soft object regions from the auxiliary logits, object
/// attention, classifier. Requires an auxiliary head.
#[derive(Debug)]
pub struct OcrHead {
    pub in_index: usize,
    pub bottleneck: ConvBnAct,
    pub attention: ObjectAttention,
    pub cls: Classifier,
}

impl OcrHead {
    pub fn new(cx: &mut HeadContext, spec: OcrSpec) -> ModelResult<Self> {
        let (in_index, info) = cx.level(spec.in_index)?;
        let mid = spec.mid_channels;
        let key = spec.key_channels.unwrap_or((mid / 2).max(1));
        let k = cx.num_classes;
        cx.pb.scoped("head", |pb| {
            Ok(Self {
                in_index,
                bottleneck: ConvBnAct::same(pb, "bottleneck", info.channels, mid, 3, 1)?,
                attention: ObjectAttention::new(pb, "object_attention", mid, key)?,
                cls: Classifier::new(pb, mid, k, spec.dropout)?,
            })
        })
    }
}

impl DecodeHead for OcrHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let aux = inputs
            .aux_logits
            .ok_or_else(|| ModelError::Config("ocrnet needs auxiliary logits".into()))?;
        let feats = self.bottleneck.forward(cx, inputs.feats.level(self.in_index)?.map)?;
        let s = feats.shape();
        let aux = if aux.shape()[2..] == s[2..] { aux } else { aux.resize_bilinear(s[2], s[3])? };
        let regions = spatial_gather(feats, aux)?;
        cx.record_internal("ocr.regions", regions);
        let y = self.attention.forward(cx, feats, regions)?;
        self.cls.forward(cx, y)
    }

    fn needs_aux(&self) -> bool {
        true
    }
}

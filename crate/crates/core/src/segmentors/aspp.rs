use serde::Deserialize;
use ssseg_nn::{cat, ConvBnAct, Ctx, ParamBuilder, Var};

use super::{default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs};
use crate::error::{ModelError, ModelResult};

/// Atrous spatial pyramid pooling, parallel form: optional image-pooling
/// branch, a 1×1 branch and one 3×3 branch per dilation rate, concatenated
/// in that order and fused by a 1×1 conv-norm-ReLU.
#[derive(Debug)]
pub struct Aspp {
    pub rates: Vec<usize>,
    pub global: Option<ConvBnAct>,
    pub pointwise: ConvBnAct,
    pub atrous: Vec<ConvBnAct>,
    pub fuse: ConvBnAct,
    pub mid_channels: usize,
}

impl Aspp {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, mid: usize, rates: &[usize], with_global: bool) -> ModelResult<Self> {
        if rates.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("aspp rates {rates:?} must be positive")));
        }
        pb.scoped(name, |pb| {
            let global = if with_global { Some(ConvBnAct::same(pb, "global", cin, mid, 1, 1)?) } else { None };
            let pointwise = ConvBnAct::same(pb, "pointwise", cin, mid, 1, 1)?;
            let atrous = rates
                .iter()
                .map(|&r| ConvBnAct::same(pb, &format!("rate{r}"), cin, mid, 3, r))
                .collect::<Result<Vec<_>, _>>()?;
            let branches = rates.len() + 1 + usize::from(with_global);
            let fuse = ConvBnAct::same(pb, "fuse", branches * mid, mid, 1, 1)?;
            Ok(Self { rates: rates.to_vec(), global, pointwise, atrous, fuse, mid_channels: mid })
        })
    }

    pub fn concat_channels(&self) -> usize {
        (self.rates.len() + 1 + usize::from(self.global.is_some())) * self.mid_channels
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let mut parts = Vec::with_capacity(self.atrous.len() + 2);
        if let Some(g) = &self.global {
            let pooled = x.adaptive_avg_pool2d(1, 1)?;
            cx.record_internal("aspp.global_pool", pooled);
            parts.push(g.forward(cx, pooled)?.resize_bilinear(h, w)?);
        }
        parts.push(self.pointwise.forward(cx, x)?);
        for (r, branch) in self.rates.iter().zip(&self.atrous) {
            let y = branch.forward(cx, x)?;
            cx.record_internal(&format!("aspp.rate{r}"), y);
            parts.push(y);
        }
        let concat = cat(&parts, 1)?;
        cx.record_internal("aspp.concat", concat);
        Ok(self.fuse.forward(cx, concat)?)
    }
}

/// Conventional rates for an output stride.
pub fn default_rates(output_stride: usize) -> Vec<usize> {
    match output_stride {
        8 => vec![12, 24, 36],
        16 => vec![6, 12, 18],
        _ => vec![3, 6, 9],
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsppSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    /// Defaults follow the backbone's output stride.
    #[serde(default)]
    pub rates: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub with_global: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_mid() -> usize {
    256
}

fn yes() -> bool {
    true
}

#[derive(Debug)]
pub struct DeepLabV3Head {
    pub in_index: usize,
    pub aspp: Aspp,
    pub cls: Classifier,
}

impl DeepLabV3Head {
    pub fn new(cx: &mut HeadContext, spec: AsppSpec) -> ModelResult<Self> {
        let (in_index, info) = cx.level(spec.in_index)?;
        let rates = spec.rates.unwrap_or_else(|| default_rates(cx.output_stride));
        let k = cx.num_classes;
        cx.pb.scoped("head", |pb| {
            let aspp = Aspp::new(pb, "aspp", info.channels, spec.mid_channels, &rates, spec.with_global)?;
            let cls = Classifier::new(pb, spec.mid_channels, k, spec.dropout)?;
            Ok(Self { in_index, aspp, cls })
        })
    }
}

impl DecodeHead for DeepLabV3Head {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let y = self.aspp.forward(cx, inputs.feats.level(self.in_index)?.map)?;
        self.cls.forward(cx, y)
    }
}

/// Low-level refinement: project the stride-4 map to `low_channels`,
/// concatenate the upsampled ASPP output before it, fuse with two 3×3
/// conv-norm-ReLU layers.
#[derive(Debug)]
pub struct DeepLabV3PlusDecoder {
    pub project: ConvBnAct,
    pub fuse: [ConvBnAct; 2],
    pub concat_channels: usize,
}

impl DeepLabV3PlusDecoder {
    pub fn new(pb: &mut ParamBuilder, aspp_channels: usize, low_in: usize, low_channels: usize, mid: usize) -> ModelResult<Self> {
        let project = ConvBnAct::same(pb, "low_project", low_in, low_channels, 1, 1)?;
        let concat_channels = aspp_channels + low_channels;
        let fuse = [
            ConvBnAct::same(pb, "decoder.0", concat_channels, mid, 3, 1)?,
            ConvBnAct::same(pb, "decoder.1", mid, mid, 3, 1)?,
        ];
        Ok(Self { project, fuse, concat_channels })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, aspp_out: Var<'g>, low_level: Var<'g>) -> ModelResult<Var<'g>> {
        let s = low_level.shape();
        let up = aspp_out.resize_bilinear(s[2], s[3])?;
        let low = self.project.forward(cx, low_level)?;
        let concat = cat(&[up, low], 1)?;
        cx.record_internal("decoder.concat", concat);
        let y = self.fuse[0].forward(cx, concat)?;
        Ok(self.fuse[1].forward(cx, y)?)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepLabV3PlusSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    /// Defaults to the stride-4 level.
    #[serde(default)]
    pub low_level_index: Option<usize>,
    #[serde(default = "default_low")]
    pub low_channels: usize,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    #[serde(default)]
    pub rates: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub with_global: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_low() -> usize {
    48
}

#[derive(Debug)]
pub struct DeepLabV3PlusHead {
    pub in_index: usize,
    pub low_index: usize,
    pub aspp: Aspp,
    pub decoder: DeepLabV3PlusDecoder,
    pub cls: Classifier,
}

impl DeepLabV3PlusHead {
    pub fn new(cx: &mut HeadContext, spec: DeepLabV3PlusSpec) -> ModelResult<Self> {
        let (in_index, info) = cx.level(spec.in_index)?;
        let low_index = match spec.low_level_index {
            Some(i) => i,
            None => cx
                .levels
                .iter()
                .position(|l| l.stride == 4)
                .ok_or_else(|| ModelError::Config("deeplabv3plus needs a stride-4 pyramid level".into()))?,
        };
        let (low_index, low) = cx.level(Some(low_index))?;
        let rates = spec.rates.unwrap_or_else(|| default_rates(cx.output_stride));
        let k = cx.num_classes;
        cx.pb.scoped("head", |pb| {
            let aspp = Aspp::new(pb, "aspp", info.channels, spec.mid_channels, &rates, spec.with_global)?;
            let decoder = DeepLabV3PlusDecoder::new(pb, spec.mid_channels, low.channels, spec.low_channels, spec.mid_channels)?;
            let cls = Classifier::new(pb, spec.mid_channels, k, spec.dropout)?;
            Ok(Self { in_index, low_index, aspp, decoder, cls })
        })
    }
}

impl DecodeHead for DeepLabV3PlusHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let deep = self.aspp.forward(cx, inputs.feats.level(self.in_index)?.map)?;
        let y = self.decoder.forward(cx, deep, inputs.feats.level(self.low_index)?.map)?;
        self.cls.forward(cx, y)
    }
}

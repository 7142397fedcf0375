//! Decode heads and the segmentor that ties backbone, head and optional
//! auxiliary head together.
//!
//! Heads produce logits at feature resolution; the segmentor upsamples main
//! and auxiliary logits bilinearly (half-pixel centres) to the input size.

mod aspp;
mod ccnet;
mod debug;
mod fcn;
mod nonlocal;
mod ocr;
mod psp;
mod upernet;

use std::fmt;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;
use ssseg_nn::{Conv2d, Conv2dArgs, ConvInit, Ctx, ForwardMode, Graph, ParamBuilder, ParamStore, Tensor, Var};

pub use aspp::{Aspp, AsppSpec, DeepLabV3Head, DeepLabV3PlusDecoder, DeepLabV3PlusHead, DeepLabV3PlusSpec};
pub use ccnet::{CcHead, CcSpec, CrissCrossAttention};
pub use debug::GtEcho;
pub use fcn::{FcnHead, FcnSpec};
pub use nonlocal::{NonLocalBlock, NonLocalHead, NonLocalSpec};
pub use ocr::{spatial_gather, ObjectAttention, OcrHead, OcrSpec};
pub use psp::{Ppm, PspHead, PspSpec};
pub use upernet::{UperHead, UperSpec};

use crate::backbones::{backbone_registry, Backbone, FeaturePyramid, LevelInfo};
use crate::checkpoint::{load_params, read_container};
use crate::datasets::mix_seed;
use crate::error::{ModelError, ModelResult};
use crate::registry::{parse_params, Category, Registry};

/// What a head sees in one forward pass.
pub struct HeadInputs<'a, 'g> {
    pub feats: &'a FeaturePyramid<'g>,
    /// Auxiliary logits at the auxiliary level's resolution.
    pub aux_logits: Option<Var<'g>>,
    pub image_size: (usize, usize),
    /// Ground-truth masks, `N×H×W`; only debug heads look at them.
    pub targets: Option<&'a [u8]>,
}

pub trait DecodeHead: fmt::Debug + Send + Sync {
    /// Logits `N×K×h×w`, at whatever resolution the head works in.
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>>;

    /// Whether the head consumes auxiliary logits.
    fn needs_aux(&self) -> bool {
        false
    }
}

/// Everything a head constructor needs.
pub struct HeadContext {
    pub pb: ParamBuilder,
    pub levels: Vec<LevelInfo>,
    pub num_classes: usize,
    pub output_stride: usize,
}

impl HeadContext {
    pub fn new(pb: ParamBuilder, levels: Vec<LevelInfo>, num_classes: usize, output_stride: usize) -> Self {
        Self { pb, levels, num_classes, output_stride }
    }

    /// `index`, or the deepest level when absent.
    pub fn level(&self, index: Option<usize>) -> ModelResult<(usize, LevelInfo)> {
        let i = index.unwrap_or(self.levels.len() - 1);
        let info = self.levels.get(i).copied().ok_or_else(|| {
            ModelError::Config(format!("head wants pyramid level {i} but the backbone emits {}", self.levels.len()))
        })?;
        Ok((i, info))
    }
}

pub type HeadRegistry = Registry<HeadContext, Box<dyn DecodeHead>>;

pub fn head_registry() -> HeadRegistry {
    fn boxed<H: DecodeHead + 'static>(r: ModelResult<H>) -> Result<Box<dyn DecodeHead>, crate::registry::CtorError> {
        Ok(Box::new(r?))
    }
    let mut r = Registry::new(Category::Segmentor);
    r.register("fcn", |cx, p| boxed(FcnHead::new(cx, "head", parse_params(p)?))).unwrap();
    r.register("pspnet", |cx, p| boxed(PspHead::new(cx, parse_params(p)?))).unwrap();
    r.register("deeplabv3", |cx, p| boxed(DeepLabV3Head::new(cx, parse_params(p)?))).unwrap();
    r.register("deeplabv3plus", |cx, p| boxed(DeepLabV3PlusHead::new(cx, parse_params(p)?))).unwrap();
    r.register("upernet", |cx, p| boxed(UperHead::new(cx, parse_params(p)?))).unwrap();
    r.register("nonlocal", |cx, p| boxed(NonLocalHead::new(cx, parse_params(p)?))).unwrap();
    r.register("ccnet", |cx, p| boxed(CcHead::new(cx, parse_params(p)?))).unwrap();
    r.register("ocrnet", |cx, p| boxed(OcrHead::new(cx, parse_params(p)?))).unwrap();
    r.register("gt_echo", |cx, p| boxed(GtEcho::new(cx, parse_params(p)?))).unwrap();
    r
}

/// Dropout followed by a 1×1 convolution to `K` channels. Weights start at
/// `N(0, 0.01²)`, bias at zero.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub dropout: f32,
    pub conv: Conv2d,
}

impl Classifier {
    pub fn new(pb: &mut ParamBuilder, cin: usize, num_classes: usize, dropout: f32) -> ModelResult<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::InvalidSpec(format!("dropout {dropout} not in [0, 1)")));
        }
        let conv = Conv2d::new(pb, "cls", cin, num_classes, 1, Conv2dArgs::default(), true, ConvInit::Normal(0.01))?;
        Ok(Self { dropout, conv })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        let x = cx.dropout(x, self.dropout)?;
        Ok(self.conv.forward(cx, x)?)
    }
}

pub(crate) fn default_dropout() -> f32 {
    0.1
}

pub(crate) fn default_bins() -> Vec<usize> {
    vec![1, 2, 3, 6]
}

/// Main logits at input resolution plus auxiliary logits.
#[derive(Clone, Debug)]
pub struct SegmentorOutput<'g> {
    pub main_logits: Var<'g>,
    pub aux_logits: Vec<Var<'g>>,
    pub internals: Vec<(String, Arc<Tensor>)>,
}

/// `model` config section.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Taken from the dataset when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub backbone: Value,
    pub segmentor: Value,
    /// Single-conv FCN head; disabled when absent or null.
    #[serde(default)]
    pub aux_head: Option<AuxSpec>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSpec {
    #[serde(default = "default_aux_index")]
    pub in_index: usize,
    #[serde(default = "default_aux_channels")]
    pub mid_channels: usize,
    #[serde(default = "one")]
    pub num_convs: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_aux_index() -> usize {
    2
}

fn default_aux_channels() -> usize {
    256
}

fn one() -> usize {
    1
}

#[derive(Debug)]
pub struct Segmentor {
    pub backbone: Box<dyn Backbone>,
    pub head: Box<dyn DecodeHead>,
    pub aux_head: Option<FcnHead>,
    pub num_classes: usize,
}

impl Segmentor {
    /// Build from a `model` section. Parameter initialization is a pure
    /// function of `seed`; each component draws from its own stream.
    pub fn build(model: &Value, num_classes: usize, seed: u64) -> ModelResult<(Self, ParamStore)> {
        let section: ModelSection = serde_json::from_value(model.clone())
            .map_err(|e| ModelError::Config(format!("model section: {e}")))?;
        if let Some(k) = section.num_classes {
            if k != num_classes {
                return Err(ModelError::Config(format!("model has {k} classes but the dataset has {num_classes}")));
            }
        }
        if !(1..=255).contains(&num_classes) {
            return Err(ModelError::Config(format!("num_classes {num_classes} not in 1..=255")));
        }
        let mut pb = ParamBuilder::new(mix_seed(&[seed, 1]));
        let backbone = pb
            .scoped("backbone", |pb| backbone_registry().build(pb, &section.backbone))
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let levels = backbone.levels().to_vec();
        let aux_head = match &section.aux_head {
            Some(a) => {
                pb.reseed(mix_seed(&[seed, 3]));
                let spec = FcnSpec {
                    in_index: Some(a.in_index),
                    mid_channels: a.mid_channels,
                    num_convs: a.num_convs,
                    dropout: a.dropout,
                };
                let mut hcx = HeadContext::new(pb, levels.clone(), num_classes, backbone.output_stride());
                let head = FcnHead::new(&mut hcx, "aux_head", spec)?;
                pb = hcx.pb;
                Some(head)
            }
            None => None,
        };
        pb.reseed(mix_seed(&[seed, 2]));
        let mut hcx = HeadContext::new(pb, levels, num_classes, backbone.output_stride());
        let head = head_registry().build(&mut hcx, &section.segmentor).map_err(|e| ModelError::Config(e.to_string()))?;
        if head.needs_aux() && aux_head.is_none() {
            return Err(ModelError::Config("this head consumes auxiliary logits; configure model.aux_head".into()));
        }
        let mut store = hcx.pb.into_store();
        if let Some(path) = backbone.pretrained() {
            let c = read_container(std::path::Path::new(path))?;
            let entries: Vec<_> = c.tensors.into_iter().filter(|(n, _)| n.starts_with("backbone.")).collect();
            load_params(&mut store, &entries, false)?;
        }
        Ok((Self { backbone, head, aux_head, num_classes }, store))
    }

    pub fn size_divisor(&self) -> usize {
        self.backbone.size_divisor()
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, images: Var<'g>, targets: Option<&[u8]>) -> ModelResult<SegmentorOutput<'g>> {
        let shape = images.shape();
        let (h, w) = (shape[2], shape[3]);
        let feats = self.backbone.forward(cx, images)?;
        let aux = match &self.aux_head {
            Some(a) => Some(a.forward(cx, &HeadInputs { feats: &feats, aux_logits: None, image_size: (h, w), targets })?),
            None => None,
        };
        let inputs = HeadInputs { feats: &feats, aux_logits: aux, image_size: (h, w), targets };
        let main = self.head.forward(cx, &inputs)?;
        let main_logits = main.resize_bilinear(h, w)?;
        let aux_logits = match aux {
            Some(a) => vec![a.resize_bilinear(h, w)?],
            None => Vec::new(),
        };
        Ok(SegmentorOutput { main_logits, aux_logits, internals: cx.take_internals() })
    }

    /// Evaluation-mode main logits for a batch.
    pub fn infer(&self, store: &ParamStore, images: &Tensor, targets: Option<&[u8]>) -> ModelResult<Tensor> {
        let g = Graph::new();
        let cx = Ctx::new(&g, store, ForwardMode::EVAL, 0);
        let x = g.constant(images.clone());
        Ok((*self.forward(&cx, x, targets)?.main_logits.value()).clone())
    }
}

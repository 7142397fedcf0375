use serde::Deserialize;
use ssseg_nn::{ConvBnAct, Ctx, Var};

use super::{default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs};
use crate::error::ModelResult;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcnSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    #[serde(default = "default_num_convs")]
    pub num_convs: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_mid() -> usize {
    512
}

fn default_num_convs() -> usize {
    2
}

/// `num_convs` 3×3 conv-norm-ReLU layers, dropout, 1×1 classifier.
#[derive(Debug)]
pub struct FcnHead {
    pub in_index: usize,
    pub convs: Vec<ConvBnAct>,
    pub cls: Classifier,
}

impl FcnHead {
    pub fn new(cx: &mut HeadContext, scope: &str, spec: FcnSpec) -> ModelResult<Self> {
        let (in_index, info) = cx.level(spec.in_index)?;
        let k = cx.num_classes;
        cx.pb.scoped(scope, |pb| {
            let mut cin = info.channels;
            let mut convs = Vec::with_capacity(spec.num_convs);
            for i in 0..spec.num_convs {
                convs.push(ConvBnAct::same(pb, &format!("convs.{i}"), cin, spec.mid_channels, 3, 1)?);
                cin = spec.mid_channels;
            }
            let cls = Classifier::new(pb, cin, k, spec.dropout)?;
            Ok(Self { in_index, convs, cls })
        })
    }

    /// Head applied to a single feature map.
    pub fn forward_map<'g>(&self, cx: &Ctx<'g>, mut x: Var<'g>) -> ModelResult<Var<'g>> {
        for c in &self.convs {
            x = c.forward(cx, x)?;
        }
        self.cls.forward(cx, x)
    }
}

impl DecodeHead for FcnHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        self.forward_map(cx, inputs.feats.level(self.in_index)?.map)
    }
}

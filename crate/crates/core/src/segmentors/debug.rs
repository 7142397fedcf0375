use serde::Deserialize;
use ssseg_nn::{Ctx, Tensor, Var};

use super::{DecodeHead, HeadContext, HeadInputs};
use crate::error::{ModelError, ModelResult};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtEchoSpec {}

/// Debugging head that returns one-hot logits of the ground truth it is
/// handed (ignored pixels become class 0). It has no parameters and
/// fails without targets; it exists to exercise evaluation end to end.
#[derive(Debug)]
pub struct GtEcho {
    pub num_classes: usize,
}

impl GtEcho {
    pub fn new(cx: &mut HeadContext, _spec: GtEchoSpec) -> ModelResult<Self> {
        Ok(Self { num_classes: cx.num_classes })
    }
}

impl DecodeHead for GtEcho {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let targets = inputs.targets.ok_or_else(|| ModelError::Config("gt_echo needs ground truth".into()))?;
        let (h, w) = inputs.image_size;
        let k = self.num_classes;
        if targets.is_empty() || targets.len() % (h * w) != 0 {
            return Err(ModelError::Config(format!("gt_echo: {} labels for {h}×{w} images", targets.len())));
        }
        let n = targets.len() / (h * w);
        let mut logits = Tensor::zeros(&[n, k, h, w]);
        let data = logits.data_mut();
        for (i, &t) in targets.iter().enumerate() {
            let class = if (t as usize) < k { t as usize } else { 0 };
            let (b, p) = (i / (h * w), i % (h * w));
            data[(b * k + class) * h * w + p] = 1.0;
        }
        Ok(cx.graph.constant(logits))
    }
}

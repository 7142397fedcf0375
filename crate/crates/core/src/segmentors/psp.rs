use serde::Deserialize;
use ssseg_nn::{cat, ConvBnAct, Ctx, ParamBuilder, Var};

use super::{default_bins, default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs};
use crate::error::{ModelError, ModelResult};

/// Pyramid pooling: per bin `b`, adaptive-average-pool to `b×b`, 1×1
/// conv-norm-ReLU to `mid` channels and upsample back; the branches are
/// concatenated after the input (`C + n·mid` channels).
#[derive(Debug)]
pub struct Ppm {
    pub bins: Vec<usize>,
    pub branches: Vec<ConvBnAct>,
    pub in_channels: usize,
    pub mid_channels: usize,
}

impl Ppm {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, mid: usize, bins: &[usize]) -> ModelResult<Self> {
        if bins.is_empty() || bins.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("bins {bins:?} must be non-empty and positive")));
        }
        pb.scoped(name, |pb| {
            let branches = bins
                .iter()
                .enumerate()
                .map(|(i, _)| ConvBnAct::same(pb, &i.to_string(), cin, mid, 1, 1))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Self { bins: bins.to_vec(), branches, in_channels: cin, mid_channels: mid })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.bins.len() * self.mid_channels
    }

    /// The concatenation `[x, branch_1, .., branch_n]`. Pooled maps are
    /// recorded as `ppm.pool{b}` internals.
    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let mut parts = vec![x];
        for (&b, branch) in self.bins.iter().zip(&self.branches) {
            let pooled = x.adaptive_avg_pool2d(b, b)?;
            cx.record_internal(&format!("ppm.pool{b}"), pooled);
            parts.push(branch.forward(cx, pooled)?.resize_bilinear(h, w)?);
        }
        let out = cat(&parts, 1)?;
        cx.record_internal("ppm.concat", out);
        Ok(out)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PspSpec {
    #[serde(default)]
    pub in_index: Option<usize>,
    #[serde(default = "default_mid")]
    pub mid_channels: usize,
    #[serde(default = "default_bins")]
    pub bins: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_mid() -> usize {
    512
}

/// PPM, 3×3 fusion to `mid` channels, classifier.
#[derive(Debug)]
pub struct PspHead {
    pub in_index: usize,
    pub ppm: Ppm,
    pub bottleneck: ConvBnAct,
    pub cls: Classifier,
}

impl PspHead {
    pub fn new(cx: &mut HeadContext, spec: PspSpec) -> ModelResult<Self> {
        let (in_index, info) = cx.level(spec.in_index)?;
        let k = cx.num_classes;
        cx.pb.scoped("head", |pb| {
            let ppm = Ppm::new(pb, "ppm", info.channels, spec.mid_channels, &spec.bins)?;
            let bottleneck = ConvBnAct::same(pb, "bottleneck", ppm.out_channels(), spec.mid_channels, 3, 1)?;
            let cls = Classifier::new(pb, spec.mid_channels, k, spec.dropout)?;
            Ok(Self { in_index, ppm, bottleneck, cls })
        })
    }
}

impl DecodeHead for PspHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let x = inputs.feats.level(self.in_index)?.map;
        let y = self.bottleneck.forward(cx, self.ppm.forward(cx, x)?)?;
        self.cls.forward(cx, y)
    }
}

use serde::Deserialize;
use ssseg_nn::{cat, ConvBnAct, Ctx, Var};

use super::{default_bins, default_dropout, Classifier, DecodeHead, HeadContext, HeadInputs, Ppm};
use crate::error::{ModelError, ModelResult};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UperSpec {
    /// Defaults to every emitted level.
    #[serde(default)]
    pub in_indices: Option<Vec<usize>>,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_bins")]
    pub bins: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_channels() -> usize {
    512
}

/// PPM on the deepest level, 1×1 laterals on the others, top-down
/// upsample-and-add, 3×3 smoothing per level, upsampling to the finest
/// level, concatenation (`levels·channels`) and a 3×3 fusion.
#[derive(Debug)]
pub struct UperHead {
    pub in_indices: Vec<usize>,
    pub ppm: Ppm,
    pub ppm_bottleneck: ConvBnAct,
    pub laterals: Vec<ConvBnAct>,
    pub smooth: Vec<ConvBnAct>,
    pub fuse: ConvBnAct,
    pub cls: Classifier,
}

impl UperHead {
    pub fn new(cx: &mut HeadContext, spec: UperSpec) -> ModelResult<Self> {
        let in_indices = spec.in_indices.clone().unwrap_or_else(|| (0..cx.levels.len()).collect());
        if in_indices.len() < 2 {
            return Err(ModelError::Config("upernet needs at least two pyramid levels".into()));
        }
        let infos = in_indices.iter().map(|&i| cx.level(Some(i)).map(|l| l.1)).collect::<ModelResult<Vec<_>>>()?;
        let (ch, k, n) = (spec.channels, cx.num_classes, infos.len());
        cx.pb.scoped("head", |pb| {
            let deepest = infos[n - 1].channels;
            let ppm = Ppm::new(pb, "ppm", deepest, ch, &spec.bins)?;
            let ppm_bottleneck = ConvBnAct::same(pb, "ppm_bottleneck", ppm.out_channels(), ch, 3, 1)?;
            let laterals = infos[..n - 1]
                .iter()
                .enumerate()
                .map(|(i, l)| ConvBnAct::same(pb, &format!("lateral.{i}"), l.channels, ch, 1, 1))
                .collect::<Result<Vec<_>, _>>()?;
            let smooth = (0..n - 1)
                .map(|i| ConvBnAct::same(pb, &format!("smooth.{i}"), ch, ch, 3, 1))
                .collect::<Result<Vec<_>, _>>()?;
            let fuse = ConvBnAct::same(pb, "fuse", n * ch, ch, 3, 1)?;
            let cls = Classifier::new(pb, ch, k, spec.dropout)?;
            Ok(Self { in_indices, ppm, ppm_bottleneck, laterals, smooth, fuse, cls })
        })
    }

    /// The fused map at the finest level's resolution, before the classifier.
    pub fn fuse_features<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let maps = self.in_indices.iter().map(|&i| Ok(inputs.feats.level(i)?.map)).collect::<ModelResult<Vec<_>>>()?;
        let n = maps.len();
        let mut lat = Vec::with_capacity(n);
        for (l, &m) in self.laterals.iter().zip(&maps) {
            lat.push(l.forward(cx, m)?);
        }
        lat.push(self.ppm_bottleneck.forward(cx, self.ppm.forward(cx, maps[n - 1])?)?);
        for i in (1..n).rev() {
            let s = lat[i - 1].shape();
            let up = lat[i].resize_bilinear(s[2], s[3])?;
            lat[i - 1] = lat[i - 1].add(up)?;
        }
        let s = lat[0].shape();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let y = if i + 1 < n { self.smooth[i].forward(cx, lat[i])? } else { lat[i] };
            outs.push(y.resize_bilinear(s[2], s[3])?);
        }
        let concat = cat(&outs, 1)?;
        cx.record_internal("uper.concat", concat);
        Ok(self.fuse.forward(cx, concat)?)
    }
}

impl DecodeHead for UperHead {
    fn forward<'g>(&self, cx: &Ctx<'g>, inputs: &HeadInputs<'_, 'g>) -> ModelResult<Var<'g>> {
        let y = self.fuse_features(cx, inputs)?;
        self.cls.forward(cx, y)
    }
}

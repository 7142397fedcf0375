//! UNet encoder-decoder.
//!
//! With output stride `s` there are `log2(s)` max-pool downsamplings. Each
//! encoder stage is two 3×3 conv-norm-ReLU layers with `base·2^i` channels.
//! Each decoder stage upsamples bilinearly by 2, projects with a 3×3
//! conv-norm-ReLU, concatenates the matching encoder map and applies two
//! more 3×3 layers. The emitted levels are the decoder outputs at strides
//! `1, 2, .., s/2` followed by the bottleneck at stride `s`; the stride-1
//! level has `base_channels` channels.

use serde::Deserialize;
use ssseg_nn::{cat, ConvBnAct, Ctx, ParamBuilder, Var};

use super::{check_input, select_levels, validate_out_indices, Backbone, FeatureLevel, FeaturePyramid, LevelInfo};
use crate::error::{ModelError, ModelResult};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_output_stride")]
    pub output_stride: usize,
    /// Defaults to every level.
    #[serde(default)]
    pub out_indices: Option<Vec<usize>>,
    #[serde(default)]
    pub pretrained: Option<String>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_base() -> usize {
    64
}

fn default_output_stride() -> usize {
    16
}

fn default_in_channels() -> usize {
    3
}

#[derive(Debug)]
struct DoubleConv {
    a: ConvBnAct,
    b: ConvBnAct,
}

impl DoubleConv {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> ModelResult<Self> {
        pb.scoped(name, |pb| {
            Ok(Self { a: ConvBnAct::same(pb, "0", cin, cout, 3, 1)?, b: ConvBnAct::same(pb, "1", cout, cout, 3, 1)? })
        })
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        Ok(self.b.forward(cx, self.a.forward(cx, x)?)?)
    }
}

#[derive(Debug)]
struct UpStage {
    project: ConvBnAct,
    fuse: DoubleConv,
}

#[derive(Debug)]
pub struct UNet {
    spec: UNetSpec,
    encoder: Vec<DoubleConv>,
    decoder: Vec<UpStage>,
    out_indices: Vec<usize>,
    all_levels: Vec<LevelInfo>,
    levels: Vec<LevelInfo>,
}

impl UNet {
    pub fn new(pb: &mut ParamBuilder, spec: UNetSpec) -> ModelResult<Self> {
        let downs = match spec.output_stride {
            8 => 3,
            16 => 4,
            32 => 5,
            s => return Err(ModelError::InvalidSpec(format!("output_stride {s} not in 8, 16, 32"))),
        };
        if spec.base_channels == 0 {
            return Err(ModelError::InvalidSpec("base_channels must be positive".into()));
        }
        let widths: Vec<usize> = (0..=downs).map(|i| spec.base_channels << i).collect();
        let encoder = pb.scoped("encoder", |pb| -> ModelResult<Vec<_>> {
            let mut cin = spec.in_channels;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let stage = DoubleConv::new(pb, &i.to_string(), cin, w);
                    cin = w;
                    stage
                })
                .collect()
        })?;
        // decoder stage i rebuilds stride 2^i from stride 2^(i+1)
        let decoder = pb.scoped("decoder", |pb| -> ModelResult<Vec<_>> {
            (0..downs)
                .map(|i| {
                    pb.scoped(&i.to_string(), |pb| {
                        Ok(UpStage {
                            project: ConvBnAct::same(pb, "project", widths[i + 1], widths[i], 3, 1)?,
                            fuse: DoubleConv::new(pb, "fuse", 2 * widths[i], widths[i])?,
                        })
                    })
                })
                .collect()
        })?;
        let all_levels: Vec<LevelInfo> =
            widths.iter().enumerate().map(|(i, &w)| LevelInfo { stride: 1 << i, channels: w }).collect();
        let out_indices = spec.out_indices.clone().unwrap_or_else(|| (0..all_levels.len()).collect());
        validate_out_indices(&out_indices, all_levels.len())?;
        let levels = select_levels(&all_levels, &out_indices);
        Ok(Self { spec, encoder, decoder, out_indices, all_levels, levels })
    }
}

impl Backbone for UNet {
    fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    fn output_stride(&self) -> usize {
        self.spec.output_stride
    }

    fn size_divisor(&self) -> usize {
        self.spec.output_stride.max(32)
    }

    fn pretrained(&self) -> Option<&str> {
        self.spec.pretrained.as_deref()
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, images: Var<'g>) -> ModelResult<FeaturePyramid<'g>> {
        check_input(images, self.spec.in_channels, self.size_divisor())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = images;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2d(2, 2, 0)?;
            }
            x = stage.forward(cx, x)?;
            skips.push(x);
        }
        let mut maps = vec![x; self.all_levels.len()];
        for i in (0..self.decoder.len()).rev() {
            let up = &self.decoder[i];
            let s = skips[i].shape();
            let y = up.project.forward(cx, x.resize_bilinear(s[2], s[3])?)?;
            x = up.fuse.forward(cx, cat(&[skips[i], y], 1)?)?;
            maps[i] = x;
        }
        let levels = self
            .out_indices
            .iter()
            .map(|&i| FeatureLevel { stride: self.all_levels[i].stride, channels: self.all_levels[i].channels, map: maps[i] })
            .collect();
        Ok(FeaturePyramid { levels })
    }
}

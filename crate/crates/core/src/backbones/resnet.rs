//! ResNet with stride control by dilation.
//!
//! Stem: 7×7 stride-2 convolution, batch norm, ReLU, 3×3 stride-2 max pool.
//! Four stages follow with nominal strides 4, 8, 16 and 32. For output
//! stride 16 the last stage keeps stride 16 and dilates by 2; for output
//! stride 8 stages three and four dilate by 2 and 4. Every block in a
//! dilated stage uses the same rate.

use serde::Deserialize;
use ssseg_nn::{BatchNorm2d, Conv2d, Conv2dArgs, ConvInit, Ctx, ParamBuilder, Var};

use super::{check_input, select_levels, validate_out_indices, Backbone, FeatureLevel, FeaturePyramid, LevelInfo};
use crate::error::{ModelError, ModelResult};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetSpec {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_output_stride")]
    pub output_stride: usize,
    #[serde(default = "default_out_indices")]
    pub out_indices: Vec<usize>,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    /// Blocks per stage; defaults to the depth's standard layout.
    #[serde(default)]
    pub stage_blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub zero_init_residual: bool,
    #[serde(default)]
    pub pretrained: Option<String>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_depth() -> usize {
    50
}

fn default_output_stride() -> usize {
    8
}

fn default_out_indices() -> Vec<usize> {
    vec![0, 1, 2, 3]
}

fn default_width() -> f64 {
    1.0
}

fn default_in_channels() -> usize {
    3
}

impl Default for ResNetSpec {
    fn default() -> Self {
        Self {
            depth: default_depth(),
            output_stride: default_output_stride(),
            out_indices: default_out_indices(),
            width_multiplier: 1.0,
            stage_blocks: None,
            zero_init_residual: false,
            pretrained: None,
            in_channels: 3,
        }
    }
}

impl ResNetSpec {
    /// Width 0.25, depth 18, one block per stage.
    pub fn tiny(output_stride: usize) -> Self {
        Self { depth: 18, output_stride, width_multiplier: 0.25, stage_blocks: Some(vec![1, 1, 1, 1]), ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        gain: f32,
    ) -> ModelResult<Self> {
        let args = Conv2dArgs { stride, padding: dilation * (k - 1) / 2, dilation };
        pb.scoped(name, |pb| {
            Ok(Self {
                conv: Conv2d::new(pb, "conv", cin, cout, k, args, false, ConvInit::KaimingFanOut)?,
                bn: BatchNorm2d::with_gain(pb, "bn", cout, gain)?,
            })
        })
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        Ok(self.bn.forward(cx, self.conv.forward(cx, x)?)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        pb: &mut ParamBuilder,
        kind: BlockKind,
        cin: usize,
        planes: usize,
        stride: usize,
        dilation: usize,
        zero_last: bool,
    ) -> ModelResult<Self> {
        let cout = planes * kind.expansion();
        let last_gain = if zero_last { 0.0 } else { 1.0 };
        let convs = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(pb, "conv1", cin, planes, 3, stride, dilation, 1.0)?,
                ConvBn::new(pb, "conv2", planes, planes, 3, 1, dilation, last_gain)?,
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(pb, "conv1", cin, planes, 1, 1, 1, 1.0)?,
                ConvBn::new(pb, "conv2", planes, planes, 3, stride, dilation, 1.0)?,
                ConvBn::new(pb, "conv3", planes, cout, 1, 1, 1, last_gain)?,
            ],
        };
        let downsample =
            if stride != 1 || cin != cout { Some(ConvBn::new(pb, "downsample", cin, cout, 1, stride, 1, 1.0)?) } else { None };
        Ok(Self { convs, downsample })
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> ModelResult<Var<'g>> {
        let mut y = x;
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(cx, y)?;
            if i + 1 < self.convs.len() {
                y = y.relu();
            }
        }
        let identity = match &self.downsample {
            Some(d) => d.forward(cx, x)?,
            None => x,
        };
        Ok(y.add(identity)?.relu())
    }
}

#[derive(Debug)]
pub struct ResNet {
    spec: ResNetSpec,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    all_levels: Vec<LevelInfo>,
    levels: Vec<LevelInfo>,
}

impl ResNet {
    pub fn new(pb: &mut ParamBuilder, spec: ResNetSpec) -> ModelResult<Self> {
        let (kind, default_blocks) = match spec.depth {
            18 => (BlockKind::Basic, vec![2, 2, 2, 2]),
            34 => (BlockKind::Basic, vec![3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, vec![3, 4, 6, 3]),
            101 => (BlockKind::Bottleneck, vec![3, 4, 23, 3]),
            d => return Err(ModelError::InvalidSpec(format!("resnet depth {d} not in 18, 34, 50, 101"))),
        };
        let (stage_strides, dilations) = match spec.output_stride {
            8 => ([1, 2, 1, 1], [1, 1, 2, 4]),
            16 => ([1, 2, 2, 1], [1, 1, 1, 2]),
            32 => ([1, 2, 2, 2], [1, 1, 1, 1]),
            s => return Err(ModelError::InvalidSpec(format!("output_stride {s} not in 8, 16, 32"))),
        };
        let blocks = spec.stage_blocks.clone().unwrap_or(default_blocks);
        if blocks.len() != 4 || blocks.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("stage_blocks {blocks:?} must be four positive counts")));
        }
        if !(spec.width_multiplier > 0.0 && spec.width_multiplier.is_finite()) {
            return Err(ModelError::InvalidSpec(format!("width_multiplier {} must be positive", spec.width_multiplier)));
        }
        validate_out_indices(&spec.out_indices, 4)?;

        let base = ((64.0 * spec.width_multiplier).round() as usize).max(1);
        let stem = ConvBn::new(pb, "stem", spec.in_channels, base, 7, 2, 1, 1.0)?;
        let mut cin = base;
        let mut stride = 4;
        let mut stages = Vec::new();
        let mut all_levels = Vec::new();
        for s in 0..4 {
            let planes = base << s;
            stride *= stage_strides[s];
            let stage = pb.scoped(&format!("layer{}", s + 1), |pb| -> ModelResult<Vec<Block>> {
                (0..blocks[s])
                    .map(|b| {
                        let (st, inp) = if b == 0 { (stage_strides[s], cin) } else { (1, planes * kind.expansion()) };
                        pb.scoped(&b.to_string(), |pb| {
                            Block::new(pb, kind, inp, planes, st, dilations[s], spec.zero_init_residual)
                        })
                    })
                    .collect()
            })?;
            cin = planes * kind.expansion();
            stages.push(stage);
            all_levels.push(LevelInfo { stride, channels: cin });
        }
        let levels = select_levels(&all_levels, &spec.out_indices);
        Ok(Self { spec, stem, stages, all_levels, levels })
    }

    pub fn spec(&self) -> &ResNetSpec {
        &self.spec
    }

    /// Info for all four stages regardless of `out_indices`.
    pub fn stage_levels(&self) -> &[LevelInfo] {
        &self.all_levels
    }
}

impl Backbone for ResNet {
    fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    fn output_stride(&self) -> usize {
        self.spec.output_stride
    }

    fn pretrained(&self) -> Option<&str> {
        self.spec.pretrained.as_deref()
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, images: Var<'g>) -> ModelResult<FeaturePyramid<'g>> {
        check_input(images, self.spec.in_channels, self.size_divisor())?;
        let mut x = self.stem.forward(cx, images)?.relu().max_pool2d(3, 2, 1)?;
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(cx, x)?;
            }
            maps.push(x);
        }
        let levels = self
            .spec
            .out_indices
            .iter()
            .map(|&i| FeatureLevel { stride: self.all_levels[i].stride, channels: self.all_levels[i].channels, map: maps[i] })
            .collect();
        Ok(FeaturePyramid { levels })
    }
}

//! Encoders. A backbone maps an `N×C×H×W` batch to a [`FeaturePyramid`]:
//! feature maps ordered by non-decreasing stride, the last one at the
//! configured output stride.

mod resnet;
mod unet;

use std::fmt;

use ssseg_nn::{Ctx, ParamBuilder, Var};

pub use resnet::{ResNet, ResNetSpec};
pub use unet::{UNet, UNetSpec};

use crate::error::{ModelError, ModelResult};
use crate::registry::{parse_params, Category, Registry};

/// Static description of one emitted level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelInfo {
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureLevel<'g> {
    pub stride: usize,
    pub channels: usize,
    pub map: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g> {
    pub levels: Vec<FeatureLevel<'g>>,
}

impl<'g> FeaturePyramid<'g> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, index: usize) -> ModelResult<&FeatureLevel<'g>> {
        self.levels
            .get(index)
            .ok_or_else(|| ModelError::Config(format!("pyramid level {index} requested but only {} emitted", self.len())))
    }

    pub fn last(&self) -> &FeatureLevel<'g> {
        self.levels.last().expect("pyramids are never empty")
    }
}

pub trait Backbone: fmt::Debug + Send + Sync {
    /// Levels `forward` returns, in order.
    fn levels(&self) -> &[LevelInfo];

    fn output_stride(&self) -> usize;

    /// Input sides must be multiples of this.
    fn size_divisor(&self) -> usize {
        32
    }

    /// Local parameter file to initialize from, if configured.
    fn pretrained(&self) -> Option<&str> {
        None
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, images: Var<'g>) -> ModelResult<FeaturePyramid<'g>>;
}

pub type BackboneRegistry = Registry<ParamBuilder, Box<dyn Backbone>>;

pub fn backbone_registry() -> BackboneRegistry {
    let mut r = Registry::new(Category::Backbone);
    r.register("resnet", |pb, p| Ok(Box::new(ResNet::new(pb, parse_params(p)?)?) as Box<dyn Backbone>)).unwrap();
    r.register("unet", |pb, p| Ok(Box::new(UNet::new(pb, parse_params(p)?)?) as Box<dyn Backbone>)).unwrap();
    r
}

pub(crate) fn check_input(x: Var<'_>, channels: usize, divisor: usize) -> ModelResult<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(ModelError::Tensor(ssseg_nn::TensorError::Shape(format!(
            "backbone expects N×{channels}×H×W, got {s:?}"
        ))));
    }
    if !s[2].is_multiple_of(divisor) || !s[3].is_multiple_of(divisor) {
        return Err(ModelError::Tensor(ssseg_nn::TensorError::Shape(format!(
            "input {}x{} is not a multiple of {divisor}",
            s[2], s[3]
        ))));
    }
    Ok(())
}

pub(crate) fn select_levels<T: Copy>(all: &[T], out_indices: &[usize]) -> Vec<T> {
    out_indices.iter().map(|&i| all[i]).collect()
}

pub(crate) fn validate_out_indices(out_indices: &[usize], available: usize) -> ModelResult<()> {
    if out_indices.is_empty() {
        return Err(ModelError::InvalidSpec("out_indices must not be empty".into()));
    }
    if out_indices.windows(2).any(|w| w[0] >= w[1]) || out_indices.iter().any(|&i| i >= available) {
        return Err(ModelError::InvalidSpec(format!(
            "out_indices {out_indices:?} must be increasing and below {available}"
        )));
    }
    Ok(())
}

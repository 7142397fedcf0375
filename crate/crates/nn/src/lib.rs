//! Small f32 tensor engine with reverse-mode autodiff, sized for training
//! compact segmentation networks on a CPU.

pub mod autograd;
pub mod error;
pub mod layers;
mod linalg;
pub mod ops;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Result, TensorError};
pub use layers::{BatchNorm2d, Conv2d, ConvBnAct, Ctx, ForwardMode, NormStats};
pub use ops::basic::cat;
pub use ops::conv::Conv2dArgs;
pub use ops::loss::{CrossEntropyOptions, CrossEntropyValue};
pub use ops::norm::BatchStats;
pub use ops::pool::{adaptive_bin, bilinear_source};
pub use params::{ConvInit, Param, ParamBuilder, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

//! Layer kernels. Each op has a plain-tensor form and a differentiable
//! [`Var`](crate::autograd::Var) method.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;
mod resize;

pub use activation::{gelu, sigmoid, Activation};
pub use conv::{conv2d, depthwise_conv2d, Conv2dParams};
pub use linear::linear;
pub use norm::{layer_norm, LayerNormParams, DEFAULT_EPS as LN_EPS};
pub use pool::maxpool2d;
pub use resize::{bilinear_upsample, resize_bilinear};

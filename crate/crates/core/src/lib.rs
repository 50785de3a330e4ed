//! A U-shaped segmentation network with residual Swin Transformer skip
//! connections and a parallel-convolution axial-shift MLP bottleneck,
//! together with the tensor, autodiff, training, evaluation and data tools
//! needed to train it on a CPU.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pcas;
pub mod rng;
pub mod swin;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, StmUNet};
pub use tensor::{Scalar, Tensor};

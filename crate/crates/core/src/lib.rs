//! Topographically regularized convolutional networks.
//!
//! Output channels of convolutional layers are given positions in 2-D or 3-D
//! space, and an auxiliary loss pulls the cosine similarity of every channel
//! pair towards `1 / (distance + 1)`. The crate contains everything needed to
//! train such networks on a CPU: a dense tensor type with reverse-mode
//! differentiation, layout generators, small VGG/ResNet style models, an SGD
//! trainer, CIFAR-10/MNIST loaders and magnitude-based channel pruning.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for the common cases.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod pruning;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod topo_loss;
pub mod topography;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use models::{Attachment, Family, Model, ModelSpec};
pub use tensor::{Gradients, OpKind, Tape, Tensor, Var};
pub use trainer::{TrainConfig, TrainOutcome, TrainState};
pub use topography::{DistanceTarget, Layout, Scheme};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

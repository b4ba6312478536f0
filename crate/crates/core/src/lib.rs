//! CPU engine for ladder-style real-time semantic segmentation.
//!
//! A ResNet-18 or MobileNetV2 encoder feeds lateral features to a lightweight
//! upsampling decoder, with spatial pyramid pooling or a two-level image
//! pyramid for receptive-field enlargement. Around the model sit the
//! measurement tools: multiply-accumulate accounting ([`profile`]), batch norm
//! folding ([`seghead::fuse_bn`]), a latency harness, an effective receptive
//! field estimator ([`erf`]) and a small training loop ([`train`]).

pub mod data;
pub mod encoder;
pub mod erf;
pub mod error;
pub mod graph;
pub mod par;
pub mod profile;
pub mod scalar;
pub mod seghead;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Backbone, Model, ModelSpec};
pub use scalar::Scalar;
pub use tensor::{Dims, Tensor, Var};

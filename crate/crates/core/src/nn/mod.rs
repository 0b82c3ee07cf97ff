//! Layers and backbone bodies built on candle tensors.

pub mod conv;
mod convnet;
mod layers;
mod params;
mod resnet;
pub mod vit;

pub use convnet::ConvNet;
pub use layers::{global_avg_pool, log_softmax, softmax, BatchNorm, BatchStats, Conv2d, LayerNorm, Linear, Pass};
pub use params::{BnLayerStats, NamedArray, Param, ParamInit, ParamMode};
pub use resnet::{BlockKind, ResNet, ResNetLayout};
pub use vit::{NormKind, Vit, VitBlockDescription, VitDescription};

pub mod channel;
pub mod config;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod scalar;
pub mod scene;
pub mod semantics;
pub mod track;
pub mod dataset;
pub mod models;
pub mod eval;
pub mod pipeline;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
pub type Checkpoint64 = nn::Checkpoint<f64>;
pub type ChannelVector64 = channel::ChannelVector<f64>;
pub type Codebook64 = channel::Codebook<f64>;
pub type PowerVector64 = channel::GlobalPowerVector<f64>;
pub type Basestation64 = channel::Basestation<f64>;

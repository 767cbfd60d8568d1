pub mod artifact;
pub mod dataset;
pub mod explain;
pub mod fict;
pub mod fixtures;
pub mod imageio;
pub mod kernels;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod region;
pub mod rng;
pub mod scalar;

pub use scalar::Scalar;

pub type GrayImage32 = artifact::GrayImage<f32>;
pub type GrayImage64 = artifact::GrayImage<f64>;
pub type LandmarkSet32 = region::LandmarkSet<f32>;
pub type LandmarkSet64 = region::LandmarkSet<f64>;
pub type Tensor32 = kernels::Tensor<f32>;
pub type Tensor64 = kernels::Tensor<f64>;
pub type ModelParams32 = kernels::ModelParams<f32>;
pub type ModelParams64 = kernels::ModelParams<f64>;

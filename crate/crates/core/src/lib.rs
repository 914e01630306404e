pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod scene_synth;
pub mod stage1;
pub mod stage2;
pub mod voxel;

pub use error::{Result, SscError};
pub use scalar::Real;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type ParamSet64 = numerics::ParamSet<f64>;
pub type ParamSet32 = numerics::ParamSet<f32>;
pub type VolumeSpec64 = geometry::VolumeSpec<f64>;
pub type ImageFrame64 = features::ImageFrame<f64>;
pub type DepthRaster64 = geometry::DepthRaster<f64>;
pub type SceneInput64 = pipeline::SceneInput<f64>;

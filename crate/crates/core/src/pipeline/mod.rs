//! The two-hand reconstruction network: backbone, interaction block, joint
//! feature extraction, joint refinement and parameter regression.

pub mod checkpoint;
mod config;
mod heads;
mod model;

pub use config::{HandModelConfig, PipelineConfig};
pub use heads::{avgpool, depth_bins, pixel_grid, soft_argmax, Dhpr, Heatmap2p5D, Hjfe, JointCoords, JointFeatures};
pub use model::{Backbone, ConvBlock, FullOutput, IfeOutput, Intermediates, JvmBlock, VmBhiNet, VmIfeBlock};

//! Two-hand mesh reconstruction with selective state-space feature blocks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation.
//! - [`nn`]: convolution, normalization, MLP, bilinear sampling, non-local attention.
//! - [`ssm`]: selective scan and the VMBlock wrapping it.
//! - [`handmodel`]: a 16-joint, 10-shape parametric hand rig with linear blend skinning.
//! - [`pipeline`]: the full image → hand parameters → meshes forward pass.
//! - [`train`]: loss, Adam, synthetic data, metrics, accounting, and the training loop.
//! - [`verify`]: the gradient suite and the scan cost benchmark.

pub mod error;
pub mod handmodel;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Layers: convolution, layer normalization, linear/MLP, bilinear grid
//! sampling and cross-attention non-local blocks.

mod attention;
mod conv;
mod linear;
mod norm;
mod params;
mod sample;

pub use attention::NonLocal;
pub use conv::{conv2d, conv_out_size, Conv2d};
pub use linear::{Linear, Mlp};
pub use norm::{layer_norm, LayerNorm};
pub use params::{Builder, Init, ParamStore};
pub use sample::grid_sample;

use crate::error::Result;
use crate::tensor::Tensor;

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.softmax(axis)
}

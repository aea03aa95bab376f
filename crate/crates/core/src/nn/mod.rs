//! A small deterministic tensor engine with exactly the layers the U-Net
//! variants need: 3x3 / 1x1 convolution, ReLU, 2x2 max-pooling, nearest
//! 2x up-sampling, channel concatenation, MSE and Adam.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod adam;
mod direct;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use graph::{ConvRole, Graph, Layer, ParamTensor, Trace};
pub use ops::{
    concat_backward, concat_channels, conv2d, conv2d_backward, maxpool2, maxpool2_backward,
    mse_loss, mse_loss_masked, relu, relu_backward, upsample2, upsample2_backward, ConvGrads,
};
pub use scalar::Scalar;
pub use tensor::Tensor4;

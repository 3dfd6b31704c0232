//! Forward and backward passes for the primitive layers.

pub mod activation;
pub mod concat;
pub mod conv;
mod gemm;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_scalar};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams, Padding};
pub use loss::{weighted_bce, weighted_bce_with_logits};
pub use norm::{
    batchnorm_backward, batchnorm_forward, batchnorm_inference, BatchNormState, BnCache, BnGrads,
};
pub use pool::{maxpool_backward, maxpool_forward, PoolParams, Pooled};
pub use resize::{bilinear_resize, bilinear_resize_backward};

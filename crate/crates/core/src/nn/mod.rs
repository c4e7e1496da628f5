//! Layer primitives with hand-derived backward passes, and the optimizers.

mod adam;
mod gemm;
mod ops;

pub use adam::{adam_step, sgd_step, AdamHyper, AdamState};
pub use ops::{
    concat_channels, conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu, relu_grad, sigmoid,
    sigmoid_scalar, split_grad, upsample2, upsample2_grad, LayerGrad, PoolIndices,
};

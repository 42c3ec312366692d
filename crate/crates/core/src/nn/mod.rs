//! Convolution, transposed convolution, batch norm, residual units and the
//! pixel-wise softmax cross-entropy loss.

mod batchnorm;
mod conv;
mod layers;
mod loss;

pub use batchnorm::BatchStats;
pub use conv::{conv2d_forward, conv2d_transposed_forward, same_padding, ConvGeometry};
pub use layers::{
    residual_unit, transposed_residual_unit, BatchNorm, Conv2d, ConvBlock, Direction, ForwardCtx, Mode, ParamKind,
    ParamMut, ParamRef, Parameterized, ResidualUnit, BN_EPS, BN_MOMENTUM,
};
pub use loss::softmax;

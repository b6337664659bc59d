//! Neural-network primitives: convolution, pooling, affine maps and
//! normalization, each as a pure function and as a tape op.

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{conv2d, transposed_conv2d, Conv2dSpec};
pub use linear::linear;
pub use norm::{batch_norm2d, layer_norm, RunningStats, BN_MOMENTUM, NORM_EPS};
pub use pool::{pool2d, PoolKind, PoolWindow};

mod layers;
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, DoubleConv, LayerNorm, Linear};

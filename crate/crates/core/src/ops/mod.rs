//! Forward and backward kernels. These are plain functions over tensors;
//! [`crate::autodiff::Tape`] records calls to them.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pointwise;
pub mod pool;

pub use conv::{conv2d, ConvSpec};
pub use dense::{channel_rescale, linear, softmax_cross_entropy};
pub use norm::{batch_norm, layer_norm, NormMode};
pub use pointwise::{activation, add, concat_channels, Activation};
pub use pool::{global_avg_pool, pool, PoolKind, PoolSpec};

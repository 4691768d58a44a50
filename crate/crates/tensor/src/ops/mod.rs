//! Differentiable operations recorded on a [`Tape`](crate::Tape).

mod attention;
mod conv;
pub(crate) mod elementwise;
mod linalg;
mod loss;
mod norm;
mod shape;

pub use attention::{attention_self, AttentionProjections};
pub use conv::conv2d;
pub use elementwise::{
    add, add_channel_bias, add_per_channel, add_scalar, broadcast_channels, div, exp, mean_all,
    mul, scale, sigmoid, silu, square, sub, sum_all,
};
pub use linalg::{linear, matmul, softmax_last};
pub use loss::{bce_with_logits, masked_mse, mse, soft_dice_loss};
pub use norm::{default_groups, group_norm, GROUP_NORM_EPS};
pub use shape::{
    avg_pool2x, concat, narrow, permute, reshape, resize_nearest, split, upsample_nearest2x,
};

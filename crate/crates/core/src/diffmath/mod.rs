//! Differentiable numeric building blocks with hand-written backward passes.

pub mod activation;
pub(crate) mod exact;
pub mod gradcheck;
pub mod linear;
pub mod spatial;

pub use activation::{sigmoid, sigmoid_backward, sigmoid_scalar, softmax, softmax_backward};
pub use gradcheck::{finite_diff_check, finite_diff_check_report, Block, GradCheckReport};
pub use linear::{hidden_width, linear_forward, Linear, Mlp, MlpCache};
pub use spatial::{
    concat_channels, slice_channels, spatial_pool, spatial_pool_backward, upsample_nearest,
    upsample_nearest_backward, window_pool, window_pool_backward, Conv2d, PoolMode, Projection,
};

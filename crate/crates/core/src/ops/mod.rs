//! Differentiable primitives. Every forward has an explicit backward rule; none
//! of them mutate their inputs.

pub mod conv;
pub mod lattice;
pub mod norm;
pub mod pointwise;
pub mod pool;

pub use conv::{conv2d, conv2d_backward};
pub use lattice::{lattice_apply, lattice_backward};
pub use norm::{channel_norm, channel_norm_backward, ChannelNorm, NormCache, NormMode};
pub use pointwise::{activation_backward, add, hadamard, hadamard_backward, relu, sigmoid, tanh, Pointwise};
pub use pool::{avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, Affine};

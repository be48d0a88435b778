//! Deterministic numeric kernels for every layer type the model stack uses.
//!
//! Kernels are pure functions of their inputs plus an explicit RNG stream;
//! they hold no shared mutable state and are safe to call concurrently on
//! disjoint data.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod pool;
pub mod softmax;

pub use activation::{dropout, dropout_backward, relu, relu_backward, DropoutMode, DropoutOut};
pub use conv::{conv2d, conv2d_backward, conv_out_dim, ConvGrads, KERNEL};
pub use gradcheck::{max_rel_error, max_rel_error_sampled};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use pool::{maxpool2d, maxpool2d_backward, pool_out_dim, PoolOut};
pub use softmax::{softmax_cross_entropy, softmax_cross_entropy_backward, SoftmaxXent};

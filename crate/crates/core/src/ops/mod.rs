//! Numerical kernels: pure functions from tensors to tensors.
//!
//! Every kernel accumulates in f64 regardless of storage dtype and reduces
//! in a fixed row-major order, so outputs are bit-reproducible.

mod conv;
mod gemm;
mod linear;
mod loss;
mod norm;
mod pointwise;
mod pool;

pub use conv::{conv2d, conv2d_grad_input, conv2d_grad_weight, conv_out_dim, grouped_conv2d};
pub use linear::{linear, linear_grads};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_grad, softmax_probs};
pub use norm::{channel_layer_norm, channel_layer_norm_grads};
pub use pointwise::{relu, relu_grad, sigmoid, sigmoid_grad, softsign, softsign_grad};
pub use pool::{global_avg_pool, global_avg_pool_grad};

//! Adaptive rotated convolution at desk scale.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`] / [`ops`] / [`tape`]: a small dense-tensor library with
//!   reverse-mode differentiation, enough to express every computation here.
//! - [`rotation`]: bilinear resampling of convolution kernels by arbitrary
//!   angles, differentiable in both the weights and the angle.
//! - [`routing`]: the lightweight network predicting per-sample rotation
//!   angles and combination weights from an input feature map.
//! - [`arc`]: the full adaptive layer: route, rotate, combine, then run a
//!   single convolution (with the n-convolutions formulation kept as an
//!   oracle and benchmark arm).
//! - [`datagen`] / [`model`]: a deterministic oriented-bars dataset and a
//!   toy classifier that can swap static convolutions for adaptive ones.
//! - [`descriptor`] / [`analysis`]: parameter/FLOP accounting (including a
//!   ResNet-50 preset), equivalence and gradient checks, and benchmarks.
//! - [`archive`]: a bit-exact binary weight format and a flat run-config
//!   text format.

pub mod analysis;
pub mod arc;
pub mod datagen;
pub mod descriptor;
pub mod error;
pub mod routing;
pub mod tape;
pub mod model;
pub mod ops;
pub mod rng;
pub mod rotation;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};

//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The engine is deliberately small: a dynamic graph of immutable [`Tensor`] nodes, each
//! holding a backward closure, plus the handful of image operations a convolutional
//! generator/discriminator pair needs (GEMM-backed convolutions, pooling, instance
//! normalisation, region pooling). Element type is generic so the same network code runs in
//! `f32` for training and `f64` for finite-difference checks.

mod backprop;
mod error;
mod float;
pub mod gradcheck;
pub mod layers;
mod ops;
pub mod optim;
pub mod param;
mod tensor;

pub use backprop::Gradients;
pub use error::{Result, TensorError};
pub use float::Float;
pub use layers::{Conv2d, ConvTranspose2d};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use param::{Init, Param, ParamPath, ParamStore};
pub use tensor::{grad_enabled, no_grad, Tensor, TensorId, VarId};

//! Second-order optimizers for multilayer perceptrons under width-dependent
//! parameterizations, with the diagnostics and sweep harness used to check
//! their infinite-width scaling.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the aliases
//! below fix the precision for the common types.

pub mod blas;
pub mod diagnostics;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod verify;

pub type Weights32 = network::Weights<f32>;
pub type Weights64 = network::Weights<f64>;
pub type Tape32 = network::Tape<f32>;
pub type Tape64 = network::Tape<f64>;
pub type Optimizer32 = optim::Optimizer<f32>;
pub type Optimizer64 = optim::Optimizer<f64>;
pub type Factor32 = linalg::Factor<f32>;
pub type Factor64 = linalg::Factor<f64>;

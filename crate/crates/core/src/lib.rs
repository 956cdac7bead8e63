//! Bayesian neural-network surrogate discovery.
//!
//! Networks are trained to a MAP point, wrapped in a Kronecker-factored
//! Laplace posterior, ranked by hierarchical evidence, sparsified under a
//! Laplace prior and accepted or rejected by leave-out validation.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the common double-precision case.

pub mod data;
pub mod evidence;
pub mod error;
pub mod laplace;
pub mod network;
pub mod opal;
pub mod scalar;
mod serde_ext;
pub mod sparsify;

pub use error::{OpalError, Result};
pub use scalar::Real;

pub type Dataset64 = data::Dataset<f64>;
pub type Parameters64 = network::Parameters<f64>;
pub type Posterior64 = laplace::LaplacePosterior<f64>;
pub type HyperParams64 = laplace::InferenceHyperParams<f64>;

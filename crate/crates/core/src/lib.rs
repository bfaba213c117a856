//! Laboratory for instruction-based editing diffusion mechanisms on synthetic,
//! block-structured tasks with analytic ground truth.
//!
//! The numerical core ([`numerics`]) is generic over the element type; the
//! aliases below fix the 64-bit training precision used everywhere else.

pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod toydata;
pub mod trainer;

pub use error::{Error, Result};

/// Training-precision tensor.
pub type Tensor = numerics::Tensor<f64>;
/// Training-precision tape.
pub type Graph = numerics::Graph<f64>;
/// Training-precision parameter store.
pub type ParamStore = numerics::ParamStore<f64>;
/// Quantization-simulation tensor.
pub type Tensor32 = numerics::Tensor<f32>;
pub use numerics::{NodeId, RngState};

//! Dense tensors, reverse-mode differentiation, counter-based randomness and
//! the checkpoint format.

pub mod checkpoint;
mod graph;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointKind};
pub use graph::{gelu_tanh, Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use params::ParamStore;
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;

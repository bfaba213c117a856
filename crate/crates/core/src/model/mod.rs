//! Conditional velocity network.
//!
//! A layer-normalized GELU MLP over `[x_t, x0, condition]`. The condition
//! concatenates a text segment (task-label embedding, summed tag embeddings,
//! raw instruction encoding), a projected sinusoidal timestep embedding and,
//! for distilled students only, two guidance-scale embeddings. Text dropout
//! swaps the whole text segment for one learned null vector; image dropout
//! zeroes the `x0` input.

mod condition;
mod net;

pub use condition::{encode_condition, forward, forward_with, CondBatch, CondLayout, ConditionVector};
pub use net::{
    guidance_features, timestep_features, FloatExec, LinearExec, LinearLayer, ModelCard, NetConfig, VelocityNet,
};

//! Post-training quantization of the velocity net's dense layers: outlier
//! smoothing, exhaustive granularity/clip/α search, straight-through scale
//! fine-tuning, simulated integer GEMMs and a bit-width-weighted MAC cost model.
//!
//! Cost model: an int8 MAC costs 0.25 of an f32 MAC and an int4 MAC 0.125.
//! Only dense-layer MACs are counted; embeddings, norms and activations are
//! treated as free.

mod calib;
mod exec;
mod kernel;
mod ptq;
mod scheme;
mod search;

pub use calib::{calibrate, CalibGuidance, CalibSet, RecordingExec, CALIB_PASSES};
pub use exec::{mac_weight, qforward, quantize_net, CostReport, LayerReport, QuantConfig, QuantExec};
pub use kernel::{
    channel_max, layer_mse, qmatmul, smooth, smooth_acts, smooth_weights, smoothing_factors, QuantLayer,
    SmoothingVector,
};
pub use ptq::{finetune_layer, PtqConfig, PtqTrace};
pub use scheme::{
    check_bits, decode_f32, dequantize, encode_f32, qmax, quantize, quantize_auto, scale_from_max, scales_for,
    Granularity, QTensor, QuantScheme, SchemeTable, GROUP_SIZE,
};
pub use search::{
    build_scheme, candidate_grid, search_scheme, sensitivity, Candidate, SearchResult, ALPHAS, CLIP_RATIOS,
    SENSITIVITY_THRESHOLD,
};

use crate::numerics::RngState;
use crate::Tensor;

/// Layer inputs `[256, 64]` with channel 3 carrying 50× outliers, and weights
/// `[64, 64]`, for smoothing experiments.
pub fn outlier_fixture(rng: &RngState) -> (Tensor, Tensor) {
    let mut r = rng.fork_named("outlier-fixture");
    let mut x = r.normal_tensor(&[256, 64], 1.0);
    for i in 0..256 {
        x.row_slice_mut(i)[3] *= 50.0;
    }
    let w = r.normal_tensor(&[64, 64], 0.125);
    (w, x)
}

/// Output MSE with only the activations quantized (per tensor), weights float.
pub fn act_quant_mse(w: &Tensor, x: &Tensor, bits: u8, smoothing: Option<&[f32]>) -> crate::Result<f64> {
    let (xs, ws) = match smoothing {
        Some(s) => (smooth_acts(x, s), smooth_weights(w, s)),
        None => (x.clone(), w.clone()),
    };
    let xq = dequantize(&quantize_auto(&xs, bits, Granularity::PerTensor, 1.0)?);
    let y = x.matmul(w)?;
    let yq = xq.matmul(&ws)?;
    Ok(y.zip_map(&yq, |a, b| (a - b).powi(2))?.mean())
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

use super::kernel::{channel_max, layer_mse, smooth_weights, smoothing_factors};
use super::scheme::{scale_from_max, scales_for, Granularity, QuantScheme};

pub const CLIP_RATIOS: [f64; 4] = [1.0, 0.9, 0.8, 0.7];
pub const ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Relative output MSE above which per-tensor int8 marks a layer sensitive.
pub const SENSITIVITY_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub granularity: Granularity,
    pub clip_ratio: f64,
    /// `None`: no smoothing.
    pub alpha: Option<f64>,
}

impl Candidate {
    pub const BASELINE: Candidate = Candidate { granularity: Granularity::PerTensor, clip_ratio: 1.0, alpha: None };
}

/// Granularity × clip ratio × α, in that nesting order.
pub fn candidate_grid() -> Vec<Candidate> {
    let mut v = Vec::with_capacity(60);
    for granularity in Granularity::ALL {
        for clip_ratio in CLIP_RATIOS {
            for a in ALPHAS {
                v.push(Candidate { granularity, clip_ratio, alpha: Some(a) });
            }
        }
    }
    v
}

/// Scheme for a candidate: smoothing from calibration maxima, weight scales
/// from the smoothed weights' own maxima, and a per-tensor activation scale
/// from the clipped calibrated maximum.
pub fn build_scheme(w: &Tensor, act_max: &[f64], bits: u8, cand: &Candidate) -> Result<QuantScheme> {
    let smoothing = cand.alpha.map(|a| smoothing_factors(w, act_max, a)).transpose()?.map(|sv| sv.s);
    let (ws, amax) = match &smoothing {
        Some(s) => {
            let ws = smooth_weights(w, s);
            let amax = act_max.iter().zip(s).fold(0.0f64, |m, (a, &f)| m.max(a / f as f64));
            (ws, amax)
        }
        None => (w.clone(), act_max.iter().fold(0.0f64, |m, a| m.max(*a))),
    };
    Ok(QuantScheme {
        bits,
        granularity: cand.granularity,
        clip_ratio: cand.clip_ratio,
        alpha: cand.alpha,
        scales: scales_for(&ws, bits, cand.granularity, 1.0),
        act_scale: scale_from_max(amax, bits, cand.clip_ratio),
        smoothing,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub scheme: QuantScheme,
    pub index: usize,
    /// Calibration output MSE of every candidate, in enumeration order.
    pub mses: Vec<f64>,
    /// Mean squared float output, for relative errors.
    pub reference_power: f64,
}

/// Exhaustive search: the candidate with the smallest calibration output MSE,
/// the first one on ties.
pub fn search_scheme(w: &Tensor, calib: &Tensor, bits: u8, candidates: &[Candidate]) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(Error::contract("scheme search needs at least one candidate"));
    }
    if calib.cols() != w.rows() {
        return Err(Error::shape(format!("calibration width {} for a layer of {} inputs", calib.cols(), w.rows())));
    }
    let act_max = channel_max(calib);
    let mut best: Option<(usize, QuantScheme)> = None;
    let mut mses = Vec::with_capacity(candidates.len());
    let mut power = 0.0;
    for (i, c) in candidates.iter().enumerate() {
        let scheme = build_scheme(w, &act_max, bits, c)?;
        let (mse, p) = layer_mse(w, calib, &scheme)?;
        power = p;
        if best.is_none() || mse < mses[best.as_ref().expect("set").0] {
            best = Some((i, scheme));
        }
        mses.push(mse);
    }
    let (index, scheme) = best.expect("nonempty candidates");
    Ok(SearchResult { scheme, index, mses, reference_power: power })
}

/// Relative output MSE of per-tensor int8, unsmoothed, unclipped.
pub fn sensitivity(w: &Tensor, calib: &Tensor) -> Result<f64> {
    let scheme = build_scheme(w, &channel_max(calib), 8, &Candidate::BASELINE)?;
    let (mse, power) = layer_mse(w, calib, &scheme)?;
    Ok(if power > 0.0 { mse / power } else { 0.0 })
}

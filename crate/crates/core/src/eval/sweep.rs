use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, summarize, EvalRecord, Summary};
use crate::error::{Error, Result};
use crate::flow::{sample_batch, NoiseReference, SampleContext, SamplerConfig, VelocityField};
use crate::numerics::RngState;
use crate::toydata::{EditPair, FeatureMap};
use crate::Tensor;

/// Scores every sampled row against its pair.
pub fn evaluate_batch(fm: &FeatureMap, pairs: &[&EditPair], x: &Tensor) -> Result<Vec<EvalRecord>> {
    if x.rows() != pairs.len() {
        return Err(Error::shape(format!("{} samples for {} pairs", x.rows(), pairs.len())));
    }
    pairs.iter().enumerate().map(|(i, p)| evaluate(fm, p, x.row_slice(i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w_image: f64,
    pub w_text: f64,
    pub summary: Summary,
    /// Network evaluations per record.
    pub eval_count: u64,
}

pub const SWEEP_HEADER: &str =
    "w_image,w_text,mean_consistency,mean_direction,mean_oracle_error,records,degenerate,eval_count";

/// Six significant digits.
pub fn fmt6(x: f64) -> String {
    format!("{x:.5e}")
}

/// Samples the test set at every `(w_I, w_T)` of the grid, row-major in
/// `w_I`. The same starting noise is reused across grid points.
pub fn sweep_cfg(
    field: &dyn VelocityField,
    base: &SamplerConfig,
    pairs: &[EditPair],
    w_image: &[f64],
    w_text: &[f64],
    rng: &RngState,
    noise_ref: Option<&dyn NoiseReference>,
) -> Result<Vec<SweepRow>> {
    if w_image.is_empty() || w_text.is_empty() {
        return Err(Error::contract("sweep grids must be nonempty"));
    }
    let refs: Vec<&EditPair> = pairs.iter().filter(|p| p.dim() == field.dim()).collect();
    let ctx = SampleContext::from_pairs(&refs)?;
    let fm = FeatureMap::new(field.dim());
    let mut rows = Vec::with_capacity(w_image.len() * w_text.len());
    for &wi in w_image {
        for &wt in w_text {
            let cfg = SamplerConfig { w_image: wi, w_text: wt, ..*base };
            let s = sample_batch(field, &ctx, &cfg, rng, noise_ref)?;
            let records = evaluate_batch(&fm, &refs, &s.x)?;
            rows.push(SweepRow { w_image: wi, w_text: wt, summary: summarize(&records), eval_count: s.eval_count });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt6(r.w_image),
            fmt6(r.w_text),
            fmt6(s.mean_consistency),
            fmt6(s.mean_direction),
            fmt6(s.mean_oracle_error),
            s.records,
            s.degenerate,
            r.eval_count
        )
        .expect("writing to a string");
    }
    out
}

/// Number of consecutive steps along `xs` that move in the wanted direction
/// (ties count as moving), and the number of steps.
pub fn monotone_steps(xs: &[f64], nondecreasing: bool) -> (usize, usize) {
    let ok = xs.windows(2).filter(|w| if nondecreasing { w[1] >= w[0] } else { w[1] <= w[0] }).count();
    (ok, xs.len().saturating_sub(1))
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toydata::{cosine, Block, EditPair, FeatureMap, Instruction, TagSet, ToySample, VALUE_BOUND};

/// A cosine metric with a flag for zero-vector (undefined) cases, which score 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn of(c: Option<f64>) -> Self {
        match c {
            Some(value) => Self { value, degenerate: false },
            None => Self { value: 0.0, degenerate: true },
        }
    }
}

fn check(fm: &FeatureMap, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() != fm.dim() {
        return Err(Error::shape(format!(
            "metric inputs of dims {} and {} with a dim-{} feature map",
            a.len(),
            b.len(),
            fm.dim()
        )));
    }
    Ok(())
}

/// Blocks guarded by a preserve tag; every block when none is present.
pub fn preserved_blocks(tags: &TagSet) -> Vec<Block> {
    let guarded: Vec<Block> =
        Block::ALL.into_iter().filter(|b| b.preserve_tag().is_some_and(|t| tags.contains(t))).collect();
    if guarded.is_empty() {
        Block::ALL.to_vec()
    } else {
        guarded
    }
}

/// Feature-space cosine between `x0` and `x_out` over the preserved blocks.
pub fn consistency_score(fm: &FeatureMap, x0: &[f64], x_out: &[f64], tags: &TagSet) -> Result<Score> {
    check(fm, x0, x_out)?;
    let blocks = preserved_blocks(tags);
    Ok(Score::of(cosine(&fm.project_blocks(x0, &blocks), &fm.project_blocks(x_out, &blocks))))
}

/// Cosine between the feature-space edit `φ(x_out) - φ(x0)` and the
/// instruction's direction.
pub fn direction_score(fm: &FeatureMap, x0: &[f64], x_out: &[f64], instr: &Instruction) -> Result<Score> {
    check(fm, x0, x_out)?;
    let Some(dir) = instr.direction(fm) else {
        return Ok(Score::of(None));
    };
    let delta: Vec<f64> = x_out.iter().zip(x0).map(|(a, b)| a - b).collect();
    Ok(Score::of(cosine(&fm.project(&delta), &dir)))
}

/// RMS distance to the analytic edit of `x0`.
pub fn oracle_error(x0: &ToySample, x_out: &[f64], instr: &Instruction) -> Result<f64> {
    let target = instr.apply(x0);
    if target.dim() != x_out.len() {
        return Err(Error::shape("oracle target and output differ in dim"));
    }
    let n = x_out.len() as f64;
    Ok((target.values().iter().zip(x_out).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt())
}

/// RMS excursion beyond the valid value range; infinite for non-finite output.
pub fn out_of_range(x_out: &[f64]) -> f64 {
    if x_out.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let n = x_out.len() as f64;
    (x_out.iter().map(|v| (v.abs() - VALUE_BOUND).max(0.0).powi(2)).sum::<f64>() / n).sqrt()
}

/// Piecewise-linear interpolation through `knots` (ascending in x), clamped
/// to the end values outside.
pub fn piecewise(knots: &[(f64, f64)], x: f64) -> f64 {
    let (first, last) = (knots[0], knots[knots.len() - 1]);
    if x.is_nan() || x >= last.0 {
        return last.1;
    }
    if x <= first.0 {
        return first.1;
    }
    for w in knots.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    last.1
}

/// Oracle RMS error → instruction-response score (decreasing).
pub const RESPONSE_KNOTS: [(f64, f64); 5] = [(0.0, 5.0), (0.05, 4.5), (0.2, 3.0), (0.5, 1.0), (1.0, 0.0)];
/// Consistency cosine → image-consistency score (increasing).
pub const CONSISTENCY_KNOTS: [(f64, f64); 5] = [(0.0, 0.0), (0.5, 1.0), (0.8, 3.0), (0.95, 4.5), (1.0, 5.0)];
/// Out-of-range RMS → quality score (decreasing).
pub const QUALITY_KNOTS: [(f64, f64); 3] = [(0.0, 5.0), (0.1, 3.0), (0.5, 0.0)];

/// `(instruction_response, image_consistency, quality)` in `[0, 5]`.
pub fn calibrate_scores(oracle_error: f64, consistency: f64, out_of_range: f64) -> [f64; 3] {
    [
        piecewise(&RESPONSE_KNOTS, oracle_error),
        piecewise(&CONSISTENCY_KNOTS, consistency),
        piecewise(&QUALITY_KNOTS, out_of_range),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub consistency: Score,
    pub direction: Score,
    pub oracle_error: f64,
    pub scores_0_5: [f64; 3],
}

impl EvalRecord {
    pub fn degenerate(&self) -> bool {
        self.consistency.degenerate || self.direction.degenerate
    }
}

pub fn evaluate(fm: &FeatureMap, pair: &EditPair, x_out: &[f64]) -> Result<EvalRecord> {
    let x0 = pair.source.values();
    let consistency = consistency_score(fm, x0, x_out, &pair.meta.tags)?;
    let direction = direction_score(fm, x0, x_out, &pair.instruction)?;
    let oracle_error = oracle_error(&pair.source, x_out, &pair.instruction)?;
    Ok(EvalRecord {
        id: pair.id,
        consistency,
        direction,
        oracle_error,
        scores_0_5: calibrate_scores(oracle_error, consistency.value, out_of_range(x_out)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    /// Percent of records whose lowest score is at least the usable threshold.
    pub usability: f64,
    pub satisfaction: f64,
}

pub const USABLE_THRESHOLD: f64 = 3.0;
pub const SATISFIED_THRESHOLD: f64 = 4.5;

pub fn rates(records: &[EvalRecord], usable: f64, satisfied: f64) -> Result<Rates> {
    if records.is_empty() {
        return Err(Error::contract("rates need at least one record"));
    }
    let pct = |th: f64| {
        let n = records.iter().filter(|r| r.scores_0_5.iter().copied().fold(f64::INFINITY, f64::min) >= th).count();
        100.0 * n as f64 / records.len() as f64
    };
    Ok(Rates { usability: pct(usable), satisfaction: pct(satisfied) })
}

/// Means over non-degenerate records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub degenerate: usize,
    pub mean_consistency: f64,
    pub mean_direction: f64,
    pub mean_oracle_error: f64,
}

pub fn summarize(records: &[EvalRecord]) -> Summary {
    let kept: Vec<&EvalRecord> = records.iter().filter(|r| !r.degenerate()).collect();
    let n = kept.len() as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| if kept.is_empty() { f64::NAN } else { kept.iter().map(|r| f(r)).sum::<f64>() / n };
    Summary {
        records: records.len(),
        degenerate: records.len() - kept.len(),
        mean_consistency: mean(&|r| r.consistency.value),
        mean_direction: mean(&|r| r.direction.value),
        mean_oracle_error: mean(&|r| r.oracle_error),
    }
}

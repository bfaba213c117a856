//! Re-captioning, tagging and coarse filtering of edit pairs.

use serde::{Deserialize, Serialize};

use super::features::{cosine, FeatureMap};
use super::types::{Block, EditPair, Instruction, OpKind, Tag, TagSet, ToySample};

/// Default per-block max-norm tolerance for tags.
pub const TAG_TOLERANCE: f64 = 1e-3;
/// Default feature-cosine threshold for video-pair filtering.
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.8;
/// Default per-block displacement ceiling for video-pair filtering.
pub const DEFAULT_CHANGE_THRESHOLD: f64 = 2.0;

/// Per-block comparison of source and target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDiff {
    pub block: Block,
    /// Largest absolute entry difference.
    pub max_abs: f64,
    /// Root-mean-square entry difference.
    pub rms: f64,
}

/// Differences and similarities between the two sides of a pair.
pub fn block_diffs(source: &ToySample, target: &ToySample) -> [BlockDiff; 4] {
    Block::ALL.map(|block| {
        let (s, t) = (source.block(block), target.block(block));
        let max_abs = s.iter().zip(t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rms = (s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64).sqrt();
        BlockDiff { block, max_abs, rms }
    })
}

/// Rewrites the instruction of a pair from its observed differences.
///
/// The block with the largest RMS difference picks the candidate operators
/// (those that write to it); each candidate is fitted by least squares and
/// the one with the smallest residual wins, ties going to enumeration order.
pub fn recaption(pair: &EditPair) -> Instruction {
    let diffs = block_diffs(&pair.source, &pair.target);
    if diffs.iter().all(|d| d.max_abs == 0.0) {
        return Instruction::noop();
    }
    let largest = diffs
        .iter()
        .fold(diffs[0], |best, d| if d.rms > best.rms { *d } else { best })
        .block;
    let mut best: Option<(f64, Instruction)> = None;
    for op in OpKind::ALL {
        if !op.blocks().contains(&largest) {
            continue;
        }
        let fit = Instruction::fit(op, &pair.source, &pair.target);
        let r = fit.residual(&pair.source, &pair.target);
        if best.is_none_or(|(br, _)| r < br) {
            best = Some((r, fit));
        }
    }
    best.map(|(_, i)| i).unwrap_or_else(Instruction::noop)
}

/// Preservation and locality tags of a pair.
///
/// A preserve tag is present iff its block's max-norm difference is below
/// `tolerance`; `local_edit` is present iff at most one block changed.
pub fn compute_tags(source: &ToySample, target: &ToySample, tolerance: f64) -> TagSet {
    let diffs = block_diffs(source, target);
    let mut tags = TagSet::empty();
    let mut changed = 0;
    for d in diffs {
        if d.max_abs < tolerance {
            if let Some(t) = d.block.preserve_tag() {
                tags.insert(t);
            }
        } else {
            changed += 1;
        }
    }
    if changed <= 1 {
        tags.insert(Tag::LocalEdit);
    }
    tags
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Similarity,
    Displacement,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: Option<FilterReason>,
    pub similarity: f64,
    pub displacement: f64,
}

/// Largest per-block L2 displacement between source and target.
pub fn max_block_displacement(source: &ToySample, target: &ToySample) -> f64 {
    Block::ALL
        .iter()
        .map(|&b| {
            source.block(b).iter().zip(target.block(b)).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Keeps a pair iff its feature cosine is at least `min_similarity` and its
/// largest block displacement is at most `max_change`. Similarity is tested
/// first.
pub fn filter_pair(pair: &EditPair, min_similarity: f64, max_change: f64, features: &FeatureMap) -> FilterDecision {
    let similarity = cosine(&features.project(pair.source.values()), &features.project(pair.target.values()))
        .unwrap_or(if pair.source == pair.target { 1.0 } else { 0.0 });
    let displacement = max_block_displacement(&pair.source, &pair.target);
    let reason = if similarity < min_similarity {
        Some(FilterReason::Similarity)
    } else if displacement > max_change {
        Some(FilterReason::Displacement)
    } else {
        None
    };
    FilterDecision { keep: reason.is_none(), reason, similarity, displacement }
}

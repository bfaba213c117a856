use std::collections::BTreeMap;

use super::types::EditPair;
use crate::error::{Error, Result};

/// Dimension-homogeneous batch of record indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub dim: usize,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.dim * self.indices.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailPolicy {
    /// Drop the incomplete last batch of each bucket.
    Drop,
    /// Keep it as a smaller batch.
    Keep,
}

/// Groups records by dimension into batches of `floor(budget / dim)` records,
/// buckets ordered by increasing dimension. Records keep dataset order within
/// a bucket.
pub fn plan_buckets(dataset: &[EditPair], token_budget: usize, tail: TailPolicy) -> Result<Vec<Batch>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in dataset.iter().enumerate() {
        if p.dim() > token_budget {
            return Err(Error::contract(format!(
                "token budget {token_budget} is below record {} dimension {}",
                p.id,
                p.dim()
            )));
        }
        buckets.entry(p.dim()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (dim, members) in buckets {
        let size = token_budget / dim;
        for chunk in members.chunks(size) {
            if chunk.len() == size || tail == TailPolicy::Keep {
                out.push(Batch { dim, indices: chunk.to_vec() });
            }
        }
    }
    Ok(out)
}

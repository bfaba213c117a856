use std::collections::HashSet;

use log::warn;

use super::types::{EditPair, OpKind};
use crate::error::{Error, Result};
use crate::numerics::RngState;

fn key(p: &EditPair) -> (Vec<u64>, Vec<u64>) {
    (
        p.source.values().iter().map(|v| v.to_bits()).collect(),
        p.target.values().iter().map(|v| v.to_bits()).collect(),
    )
}

/// Appends the backward edit of every invertible pair.
///
/// Reversed pairs swap source and target, carry the inverse instruction and
/// keep the meta-information. A pair whose reverse is already present is not
/// reversed again, so the operation is idempotent. New records get ids after
/// the current maximum.
pub fn augment_reverse(dataset: &[EditPair]) -> Vec<EditPair> {
    let mut out = dataset.to_vec();
    let mut seen: HashSet<(Vec<u64>, Vec<u64>)> = dataset.iter().map(key).collect();
    let mut next_id = dataset.iter().map(|p| p.id).max().map_or(0, |m| m + 1);
    for p in dataset {
        let Some(inverse) = p.instruction.inverse() else { continue };
        let reversed = EditPair {
            id: next_id,
            source: p.target.clone(),
            target: p.source.clone(),
            instruction: inverse,
            meta: p.meta,
            quality: p.quality,
            weight: p.weight,
        };
        if seen.insert(key(&reversed)) {
            next_id += 1;
            out.push(reversed);
        }
    }
    out
}

/// Outcome of [`importance_resample`].
#[derive(Clone, Debug)]
pub struct Resampled {
    pub pairs: Vec<EditPair>,
    /// Normalized sampling probability per op kind (in [`OpKind::ALL`] order).
    pub target_freq: [f64; 6],
    /// Empirical op-kind frequency of the input.
    pub source_freq: [f64; 6],
    pub warnings: Vec<String>,
}

/// Resamples with replacement so op-kind frequencies follow `class_weights`
/// (indexed by [`OpKind::index`]).
///
/// Each drawn record's weight is multiplied by `source_freq / target_freq` of
/// its class, so weighted averages over the resampled set estimate averages
/// over the original set. Weighted classes absent from the dataset are
/// dropped with a warning and the remaining weights renormalized.
pub fn importance_resample(dataset: &[EditPair], class_weights: &[f64; 6], rng: &mut RngState) -> Result<Resampled> {
    if dataset.is_empty() {
        return Err(Error::contract("importance_resample needs a nonempty dataset"));
    }
    if class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::contract("class weights must be finite and nonnegative"));
    }
    let mut members: [Vec<usize>; 6] = Default::default();
    for (i, p) in dataset.iter().enumerate() {
        members[p.instruction.op_kind.index()].push(i);
    }
    let n = dataset.len() as f64;
    let source_freq = members.each_ref().map(|m| m.len() as f64 / n);

    let mut warnings = Vec::new();
    let mut effective = *class_weights;
    for op in OpKind::ALL {
        let k = op.index();
        if members[k].is_empty() && effective[k] > 0.0 {
            let msg = format!("op kind {op} has weight {} but no records; renormalizing", effective[k]);
            warn!("{msg}");
            warnings.push(msg);
            effective[k] = 0.0;
        }
    }
    let total: f64 = effective.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("no op kind present in the dataset carries positive weight"));
    }
    let target_freq = effective.map(|w| w / total);

    let pairs = (0..dataset.len())
        .map(|_| {
            let k = rng.categorical(&target_freq);
            let idx = members[k][rng.index(members[k].len())];
            let mut p = dataset[idx].clone();
            p.weight *= source_freq[k] / target_freq[k];
            p
        })
        .collect();
    Ok(Resampled { pairs, target_freq, source_freq, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::generate::{gen_pairs, GenSpec};
    use crate::toydata::types::SourceKind;

    fn corpus(ops: &[OpKind], n: usize, seed: u64) -> Vec<EditPair> {
        let spec = GenSpec::new(SourceKind::TraditionalOp, n, &[8, 16]).with_ops(ops);
        gen_pairs(&spec, &RngState::new(seed)).unwrap()
    }

    fn counts(pairs: &[EditPair]) -> [usize; 6] {
        let mut c = [0; 6];
        for p in pairs {
            c[p.instruction.op_kind.index()] += 1;
        }
        c
    }

    #[test]
    fn reversed_shift_negates_delta() {
        let data = corpus(&[OpKind::ShiftContent], 1, 1);
        let out = augment_reverse(&data);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].instruction.params[0], -data[0].instruction.params[0]);
        assert_eq!(out[1].source, data[0].target);
        assert_eq!(out[1].meta, data[0].meta);
    }

    #[test]
    fn non_invertible_only_is_unchanged() {
        let spec = GenSpec::new(SourceKind::Specialist, 30, &[8]).with_ops(&[OpKind::ChangeIdentity]);
        let data = gen_pairs(&spec, &RngState::new(2)).unwrap();
        assert_eq!(augment_reverse(&data), data);
    }

    #[test]
    fn reverse_round_trip_on_mixed_set() {
        let data = corpus(&[], 100, 3);
        let out = augment_reverse(&data);
        assert!(out.len() <= 2 * data.len());
        for p in &data {
            if let Some(inv) = p.instruction.inverse() {
                let back = inv.apply(&p.instruction.apply(&p.source));
                for (a, b) in back.values().iter().zip(p.source.values()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn idempotent_closure() {
        let data = corpus(&[], 60, 4);
        let once = augment_reverse(&data);
        assert_eq!(augment_reverse(&once), once);
    }

    #[test]
    fn uniform_weights_keep_balance() {
        let mut data = corpus(&[OpKind::ShiftContent], 5000, 5);
        data.extend(corpus(&[OpKind::RotateStructure], 5000, 6));
        let mut w = [0.0; 6];
        w[0] = 1.0;
        w[1] = 1.0;
        let out = importance_resample(&data, &w, &mut RngState::new(7)).unwrap();
        let c = counts(&out.pairs);
        assert!((c[0] as f64 / 10_000.0 - 0.5).abs() < 0.02);
        assert!(out.pairs.iter().all(|p| (p.weight - 1.0).abs() < 1e-12));
    }

    #[test]
    fn nine_to_one_weighting() {
        let mut data = corpus(&[OpKind::ShiftContent], 5000, 8);
        data.extend(corpus(&[OpKind::SwapStyle], 5000, 9));
        let mut w = [0.0; 6];
        w[OpKind::ShiftContent.index()] = 9.0;
        w[OpKind::SwapStyle.index()] = 1.0;
        let out = importance_resample(&data, &w, &mut RngState::new(10)).unwrap();
        let c = counts(&out.pairs);
        let ratio = c[0] as f64 / c[2] as f64;
        assert!((ratio - 9.0).abs() < 0.45, "ratio {ratio}");
        // weighted class mass recovers the original 50/50 split
        let mass: f64 = out.pairs.iter().filter(|p| p.instruction.op_kind == OpKind::ShiftContent).map(|p| p.weight).sum();
        assert!((mass / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn single_class_is_unweighted() {
        let data = corpus(&[OpKind::RotateStructure], 200, 11);
        let mut w = [0.0; 6];
        w[1] = 3.0;
        let out = importance_resample(&data, &w, &mut RngState::new(12)).unwrap();
        assert!(out.pairs.iter().all(|p| p.weight == 1.0));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn absent_class_warns_and_renormalizes() {
        let data = corpus(&[OpKind::RotateStructure], 50, 13);
        let out = importance_resample(&data, &[1.0; 6], &mut RngState::new(14)).unwrap();
        assert_eq!(out.warnings.len(), 5);
        assert_eq!(out.target_freq[1], 1.0);
    }
}

//! Evaluation: feature-space consistency and direction metrics, an analytic
//! oracle error, 0–5 score calibrations, usability/satisfaction rates and
//! guidance trade-off sweeps.
//!
//! Score calibrations are piecewise linear through the knot tables in
//! [`metrics`]; records whose cosine metrics are undefined are flagged
//! degenerate and left out of means.

pub mod metrics;
mod sweep;

pub use metrics::{
    calibrate_scores, consistency_score, direction_score, evaluate, oracle_error, out_of_range, piecewise,
    preserved_blocks, rates, summarize, EvalRecord, Rates, Score, Summary, SATISFIED_THRESHOLD, USABLE_THRESHOLD,
};
pub use sweep::{evaluate_batch, fmt6, monotone_steps, sweep_cfg, sweep_csv, SweepRow, SWEEP_HEADER};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::SamplerConfig;
    use crate::model::{NetConfig, VelocityNet};
    use crate::numerics::RngState;
    use crate::toydata::{
        cosine, gen_pairs, Block, EditPair, FeatureMap, GenSpec, Instruction, OpKind, SourceKind, Tag, TagSet,
    };

    fn pairs(n: usize, ops: &[OpKind]) -> Vec<EditPair> {
        gen_pairs(&GenSpec::new(SourceKind::Specialist, n, &[16]).with_ops(ops), &RngState::new(5)).unwrap()
    }

    #[test]
    fn consistency_identity_and_antipode() {
        let fm = FeatureMap::new(16);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let none = TagSet::empty();
        assert!((consistency_score(&fm, &x, &x, &none).unwrap().value - 1.0).abs() < 1e-12);
        assert!((consistency_score(&fm, &x, &neg, &none).unwrap().value + 1.0).abs() < 1e-12);
        let zero = vec![0.0; 16];
        assert!(consistency_score(&fm, &x, &zero, &none).unwrap().degenerate);
        assert!(consistency_score(&fm, &x, &x[..8], &none).is_err());
    }

    #[test]
    fn tagged_consistency_uses_only_the_guarded_block() {
        let fm = FeatureMap::new(16);
        let x0: Vec<f64> = (0..16).map(|i| 1.0 + (i as f64).cos()).collect();
        let mut out = x0.clone();
        for j in Block::Content.range(16) {
            out[j] += 3.0;
        }
        for j in Block::Identity.range(16) {
            out[j] *= 0.9;
        }
        let tags = TagSet::of(&[Tag::IdentityPreserve]);
        let got = consistency_score(&fm, &x0, &out, &tags).unwrap().value;
        // brute force over the identity columns of each feature row
        let sub = |x: &[f64]| -> Vec<f64> {
            fm.rows().iter().map(|r| Block::Identity.range(16).map(|j| r[j] * x[j]).sum()).collect()
        };
        let want = cosine(&sub(&x0), &sub(&out)).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.0).abs() < 1e-12, "scaling a block keeps its direction");
    }

    #[test]
    fn exact_shift_edits_reach_the_corpus_maximum() {
        let fm = FeatureMap::new(16);
        let data = pairs(200, &[OpKind::ShiftContent]);
        let scores: Vec<f64> = data
            .iter()
            .map(|p| {
                let out = p.instruction.apply(&p.source);
                direction_score(&fm, p.source.values(), out.values(), &p.instruction).unwrap().value
            })
            .collect();
        let max = scores.iter().copied().fold(f64::MIN, f64::max);
        assert!(scores.iter().all(|s| max - s <= 0.05));
    }

    #[test]
    fn reversed_edits_score_negative_and_noops_are_degenerate() {
        let fm = FeatureMap::new(16);
        for p in pairs(50, &[OpKind::ShiftContent, OpKind::RotateStructure, OpKind::GlobalRestyle]) {
            let out = p.instruction.apply(&p.source);
            let back: Vec<f64> = p.source.values().iter().zip(out.values()).map(|(a, b)| 2.0 * a - b).collect();
            if p.instruction.direction(&fm).is_some() && out != p.source {
                let fwd = direction_score(&fm, p.source.values(), out.values(), &p.instruction).unwrap();
                let rev = direction_score(&fm, p.source.values(), &back, &p.instruction).unwrap();
                assert!((rev.value + fwd.value).abs() < 1e-9);
            }
        }
        let p = &pairs(1, &[OpKind::ShiftContent])[0];
        let s = direction_score(&fm, p.source.values(), p.source.values(), &Instruction::noop()).unwrap();
        assert!(s.degenerate);
        let shift = Instruction::new(OpKind::ShiftContent, &[0.5]);
        let mut away = p.source.values().to_vec();
        for j in Block::Content.range(16) {
            away[j] -= 0.5;
        }
        assert!(direction_score(&fm, p.source.values(), &away, &shift).unwrap().value < 0.0);
    }

    #[test]
    fn calibrations_are_monotone_and_bounded() {
        let grid: Vec<f64> = (0..=400).map(|i| -0.5 + i as f64 * 0.005).collect();
        let r: Vec<f64> = grid.iter().map(|&e| calibrate_scores(e.max(0.0), 0.5, 0.0)[0]).collect();
        let c: Vec<f64> = grid.iter().map(|&x| calibrate_scores(0.0, x, 0.0)[1]).collect();
        let q: Vec<f64> = grid.iter().map(|&x| calibrate_scores(0.0, 0.5, x.max(0.0))[2]).collect();
        assert!(r.windows(2).all(|w| w[1] <= w[0]));
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
        assert!(q.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.iter().chain(&c).chain(&q).all(|v| (0.0..=5.0).contains(v)));
        assert_eq!(calibrate_scores(0.0, 1.0, 0.0), [5.0, 5.0, 5.0]);
        assert_eq!(calibrate_scores(f64::INFINITY, -1.0, f64::INFINITY), [0.0, 0.0, 0.0]);
    }

    fn rec(scores: [f64; 3]) -> EvalRecord {
        let s = Score { value: 1.0, degenerate: false };
        EvalRecord { id: 0, consistency: s, direction: s, oracle_error: 0.0, scores_0_5: scores }
    }

    #[test]
    fn rates_match_hand_counts() {
        let all5 = vec![rec([5.0; 3]); 4];
        assert_eq!(rates(&all5, 3.0, 4.5).unwrap(), Rates { usability: 100.0, satisfaction: 100.0 });
        let all0 = vec![rec([0.0; 3]); 4];
        assert_eq!(rates(&all0, 3.0, 4.5).unwrap(), Rates { usability: 0.0, satisfaction: 0.0 });
        let mixed: Vec<EvalRecord> = [
            [5.0, 5.0, 5.0], // usable, satisfied
            [4.5, 5.0, 4.6], // usable, satisfied
            [4.4, 5.0, 5.0], // usable
            [3.0, 3.0, 3.0], // usable
            [2.9, 5.0, 5.0],
            [5.0, 0.0, 5.0],
            [3.5, 4.0, 3.2], // usable
            [4.6, 4.7, 4.49], // usable
            [1.0, 1.0, 1.0],
            [5.0, 5.0, 4.5], // usable, satisfied
        ]
        .into_iter()
        .map(rec)
        .collect();
        assert_eq!(rates(&mixed, 3.0, 4.5).unwrap(), Rates { usability: 70.0, satisfaction: 30.0 });
        assert!(rates(&[], 3.0, 4.5).is_err());
    }

    #[test]
    fn perfect_outputs_score_five() {
        let fm = FeatureMap::new(16);
        for p in pairs(40, &OpKind::ALL) {
            let out = p.instruction.apply(&p.source);
            let r = evaluate(&fm, &p, out.values()).unwrap();
            assert_eq!(r.oracle_error, 0.0);
            assert_eq!(r.scores_0_5[0], 5.0);
        }
    }

    #[test]
    fn sweep_rows_and_csv_schema() {
        let net = VelocityNet::init(NetConfig::new(16).with_width(32), &RngState::new(1)).unwrap();
        let data = pairs(12, &[OpKind::ShiftContent]);
        let base = SamplerConfig::teacher(3, 1.0, 1.0);
        let one = sweep_cfg(&net, &base, &data, &[1.5], &[2.0], &RngState::new(2), None).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].eval_count, 9);
        let grid = sweep_cfg(&net, &base, &data, &[1.0, 2.0], &[1.0, 2.0, 4.0], &RngState::new(2), None).unwrap();
        assert_eq!(grid.len(), 6);
        assert_eq!((grid[4].w_image, grid[4].w_text), (2.0, 2.0));
        let csv = sweep_csv(&grid);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("1.00000e0,1.00000e0,"));
        assert_eq!(csv, sweep_csv(&sweep_cfg(&net, &base, &data, &[1.0, 2.0], &[1.0, 2.0, 4.0], &RngState::new(2), None).unwrap()));
        assert!(sweep_cfg(&net, &base, &data, &[], &[1.0], &RngState::new(2), None).is_err());
    }

    #[test]
    fn monotone_step_counting() {
        assert_eq!(monotone_steps(&[1.0, 2.0, 2.0, 1.5, 3.0], true), (3, 4));
        assert_eq!(monotone_steps(&[1.0, 2.0, 2.0, 1.5, 3.0], false), (2, 4));
    }
}

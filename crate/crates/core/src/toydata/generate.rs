//! Source-kind generators.
//!
//! | kind            | edit                                   | quality        |
//! |-----------------|----------------------------------------|----------------|
//! | synthesized     | instructed edit + N(0, 0.1) leakage on one untouched block | U(0.4, 0.9) |
//! | specialist      | clean single-block edit                | U(0.7, 1.0)    |
//! | traditional_op  | exact analytic edit                    | 1.0            |
//! | video_frames    | two perturbations of a shared latent, no instruction | U(0.5, 1.0) |

use serde::{Deserialize, Serialize};

use super::annotate::{compute_tags, TAG_TOLERANCE};
use super::types::{Block, EditPair, Instruction, MetaInfo, OpKind, SourceKind, ToySample, DIMS};
use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Standard deviation of the unintended change added to synthesized pairs.
pub const LEAK_SIGMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub kind: SourceKind,
    pub n: usize,
    pub dims: Vec<usize>,
    /// Operators to draw from; empty means the kind's default set.
    #[serde(default)]
    pub ops: Vec<OpKind>,
    /// Id of the first record; record `i` gets `first_id + i`.
    #[serde(default)]
    pub first_id: u64,
}

impl GenSpec {
    pub fn new(kind: SourceKind, n: usize, dims: &[usize]) -> Self {
        Self { kind, n, dims: dims.to_vec(), ops: Vec::new(), first_id: 0 }
    }

    pub fn with_ops(mut self, ops: &[OpKind]) -> Self {
        self.ops = ops.to_vec();
        self
    }

    pub fn with_first_id(mut self, id: u64) -> Self {
        self.first_id = id;
        self
    }
}

fn default_ops(kind: SourceKind) -> &'static [OpKind] {
    match kind {
        SourceKind::Synthesized => &[
            OpKind::ShiftContent,
            OpKind::RotateStructure,
            OpKind::SwapStyle,
            OpKind::ChangeIdentity,
            OpKind::GlobalRestyle,
        ],
        SourceKind::Specialist => {
            &[OpKind::ShiftContent, OpKind::RotateStructure, OpKind::SwapStyle, OpKind::ChangeIdentity]
        }
        SourceKind::TraditionalOp => {
            &[OpKind::ShiftContent, OpKind::RotateStructure, OpKind::SwapStyle, OpKind::GlobalRestyle]
        }
        SourceKind::VideoFrames => &[],
    }
}

/// Draws operator parameters with edits well above the leakage level.
pub fn random_instruction(op: OpKind, rng: &mut RngState) -> Instruction {
    match op {
        OpKind::ShiftContent => Instruction::new(op, &[rng.sign() * rng.uniform_in(0.5, 1.5)]),
        OpKind::RotateStructure => Instruction::new(op, &[rng.sign() * rng.uniform_in(0.3, 1.2)]),
        OpKind::SwapStyle => Instruction::new(op, &[rng.uniform_in(0.5, 1.5)]),
        OpKind::ChangeIdentity => Instruction::new(op, &[rng.uniform_in(-1.0, 1.0)]),
        OpKind::GlobalRestyle => {
            let g = 1.0 + rng.sign() * rng.uniform_in(0.2, 0.5);
            Instruction::new(op, &[g, rng.uniform_in(-0.5, 0.5)])
        }
        OpKind::IdentityNoop => Instruction::noop(),
    }
}

pub fn random_sample(dim: usize, rng: &mut RngState) -> ToySample {
    ToySample::from_raw((0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
}

fn clamp_sample(values: Vec<f64>) -> ToySample {
    ToySample::from_raw(values.into_iter().map(|v| v.clamp(-4.0, 4.0)).collect())
}

/// Generates `spec.n` pairs. Record `i` draws from its own stream, so the
/// result does not depend on generation order.
pub fn gen_pairs(spec: &GenSpec, rng: &RngState) -> Result<Vec<EditPair>> {
    if spec.dims.is_empty() {
        return Err(Error::contract("gen_pairs needs at least one dimension"));
    }
    if let Some(d) = spec.dims.iter().find(|d| !DIMS.contains(d)) {
        return Err(Error::contract(format!("dimension {d} is not one of {DIMS:?}")));
    }
    if spec.n == 0 {
        return Err(Error::contract("gen_pairs needs n > 0"));
    }
    let ops = if spec.ops.is_empty() { default_ops(spec.kind) } else { &spec.ops[..] };
    let stream = rng.fork_named(spec.kind.name());
    Ok((0..spec.n as u64)
        .map(|i| {
            let id = spec.first_id + i;
            generate_one(spec.kind, id, &spec.dims, ops, &mut stream.fork(id))
        })
        .collect())
}

fn generate_one(kind: SourceKind, id: u64, dims: &[usize], ops: &[OpKind], rng: &mut RngState) -> EditPair {
    let dim = dims[rng.index(dims.len())];
    let source = random_sample(dim, rng);
    let (target, instruction, quality) = match kind {
        SourceKind::VideoFrames => {
            let sigma = rng.uniform_in(0.02, 0.3);
            let latent = source.values().to_vec();
            let a = clamp_sample(latent.iter().map(|v| v + sigma * rng.normal()).collect());
            let b = clamp_sample(latent.iter().map(|v| v + sigma * rng.normal()).collect());
            let quality = rng.uniform_in(0.5, 1.0);
            return finish(id, kind, a, b, Instruction::noop(), quality);
        }
        _ => {
            let op = ops[rng.index(ops.len())];
            let ins = random_instruction(op, rng);
            let mut target = ins.apply(&source);
            let quality = match kind {
                SourceKind::Synthesized => {
                    let untouched: Vec<Block> =
                        Block::ALL.into_iter().filter(|b| !op.blocks().contains(b)).collect();
                    let leak = untouched[rng.index(untouched.len())];
                    let mut values = target.values().to_vec();
                    for j in leak.range(dim) {
                        values[j] += LEAK_SIGMA * rng.normal();
                    }
                    target = clamp_sample(values);
                    rng.uniform_in(0.4, 0.9)
                }
                SourceKind::Specialist => rng.uniform_in(0.7, 1.0),
                _ => 1.0,
            };
            (target, ins, quality)
        }
    };
    finish(id, kind, source, target, instruction, quality)
}

fn finish(
    id: u64,
    kind: SourceKind,
    source: ToySample,
    target: ToySample,
    instruction: Instruction,
    quality: f64,
) -> EditPair {
    let tags = compute_tags(&source, &target, TAG_TOLERANCE);
    EditPair {
        id,
        source,
        target,
        instruction,
        meta: MetaInfo { task_label: kind.task_label(), tags, source_kind: kind },
        quality,
        weight: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::annotate::{block_diffs, recaption};
    use crate::toydata::types::TaskLabel;

    #[test]
    fn traditional_shift_is_exact() {
        let spec = GenSpec::new(SourceKind::TraditionalOp, 50, &[8, 16, 32, 64]).with_ops(&[OpKind::ShiftContent]);
        for p in gen_pairs(&spec, &RngState::new(1)).unwrap() {
            let d = p.instruction.params[0];
            for b in [Block::Identity, Block::Structure, Block::Style] {
                assert_eq!(p.source.block(b), p.target.block(b));
            }
            for (s, t) in p.source.block(Block::Content).iter().zip(p.target.block(Block::Content)) {
                assert_eq!(*t, s + d);
            }
            assert_eq!(p.quality, 1.0);
            assert_eq!(p.meta.task_label, TaskLabel::TraditionalOp);
        }
    }

    #[test]
    fn synthesized_leakage_statistics() {
        let spec = GenSpec::new(SourceKind::Synthesized, 1000, &[8, 16, 32, 64]).with_ops(&[OpKind::ShiftContent]);
        let pairs = gen_pairs(&spec, &RngState::new(2)).unwrap();
        let (mut sq, mut count) = (0.0, 0usize);
        for p in &pairs {
            let exact = p.instruction.apply(&p.source);
            let leaked: Vec<Block> = Block::ALL
                .into_iter()
                .filter(|&b| b != Block::Content && p.target.block(b) != exact.block(b))
                .collect();
            assert_eq!(leaked.len(), 1, "exactly one untouched block leaks");
            for (a, b) in p.target.block(leaked[0]).iter().zip(exact.block(leaked[0])) {
                sq += (a - b) * (a - b);
                count += 1;
            }
            assert_eq!(p.target.block(Block::Content), exact.block(Block::Content));
        }
        let rms = (sq / count as f64).sqrt();
        assert!((rms - LEAK_SIGMA).abs() < 0.03, "rms {rms}");
    }

    #[test]
    fn synthesized_recaption_accuracy() {
        let spec = GenSpec::new(SourceKind::Synthesized, 1000, &[8, 16, 32, 64]).with_ops(&[OpKind::ShiftContent]);
        let pairs = gen_pairs(&spec, &RngState::new(3)).unwrap();
        let hits = pairs.iter().filter(|p| recaption(p).op_kind == OpKind::ShiftContent).count();
        assert!(hits >= 990, "{hits}/1000");
    }

    #[test]
    fn traditional_recaption_is_exact_for_every_op() {
        let spec = GenSpec::new(SourceKind::TraditionalOp, 400, &[8, 16, 32, 64]);
        for p in gen_pairs(&spec, &RngState::new(4)).unwrap() {
            let r = recaption(&p);
            assert_eq!(r.op_kind, p.instruction.op_kind);
            for (a, b) in r.params.iter().zip(p.instruction.params) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn video_pairs_start_without_instruction() {
        let spec = GenSpec::new(SourceKind::VideoFrames, 20, &[8]);
        for p in gen_pairs(&spec, &RngState::new(5)).unwrap() {
            assert_eq!(p.instruction.op_kind, OpKind::IdentityNoop);
            assert!(block_diffs(&p.source, &p.target).iter().all(|d| d.max_abs > 0.0));
        }
    }

    #[test]
    fn generation_is_order_independent() {
        let rng = RngState::new(6);
        let all = gen_pairs(&GenSpec::new(SourceKind::Specialist, 10, &[16]), &rng).unwrap();
        let tail = gen_pairs(&GenSpec::new(SourceKind::Specialist, 4, &[16]).with_first_id(6), &rng).unwrap();
        assert_eq!(&all[6..], &tail[..]);
    }

    #[test]
    fn bad_requests_are_rejected() {
        let rng = RngState::new(7);
        assert!(gen_pairs(&GenSpec::new(SourceKind::Specialist, 3, &[]), &rng).is_err());
        assert!(gen_pairs(&GenSpec::new(SourceKind::Specialist, 3, &[12]), &rng).is_err());
    }

    #[test]
    fn values_stay_in_range() {
        for kind in SourceKind::ALL {
            for p in gen_pairs(&GenSpec::new(kind, 200, &[8, 64]), &RngState::new(8)).unwrap() {
                assert!(ToySample::new(p.source.values().to_vec()).is_ok());
                assert!(ToySample::new(p.target.values().to_vec()).is_ok());
            }
        }
    }
}

//! Analytic editing operators, their inverses and least-squares parameter fits.

use super::features::FeatureMap;
use super::types::{Block, Instruction, OpKind, ToySample};

impl Instruction {
    /// Exact analytic edit of `x`.
    pub fn apply(&self, x: &ToySample) -> ToySample {
        let mut out = x.clone();
        let p = self.params;
        match self.op_kind {
            OpKind::ShiftContent => {
                for v in out.block_mut(Block::Content) {
                    *v += p[0];
                }
            }
            OpKind::RotateStructure => {
                let (s, c) = p[0].sin_cos();
                for pair in out.block_mut(Block::Structure).chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = a * c - b * s;
                    pair[1] = a * s + b * c;
                }
            }
            OpKind::SwapStyle => {
                let src: Vec<f64> = x.block(Block::Style).iter().rev().copied().collect();
                for (v, s) in out.block_mut(Block::Style).iter_mut().zip(src) {
                    *v = p[0] * s;
                }
            }
            OpKind::ChangeIdentity => {
                for v in out.block_mut(Block::Identity) {
                    *v = p[0];
                }
            }
            OpKind::GlobalRestyle => {
                for b in [Block::Structure, Block::Style, Block::Content] {
                    for v in out.block_mut(b) {
                        *v = p[0] * *v + p[1];
                    }
                }
            }
            OpKind::IdentityNoop => {}
        }
        out
    }

    /// Exact inverse, when one exists.
    pub fn inverse(&self) -> Option<Instruction> {
        let p = self.params;
        match self.op_kind {
            OpKind::ShiftContent => Some(Instruction::new(OpKind::ShiftContent, &[-p[0]])),
            OpKind::RotateStructure => Some(Instruction::new(OpKind::RotateStructure, &[-p[0]])),
            OpKind::SwapStyle if p[0] != 0.0 => Some(Instruction::new(OpKind::SwapStyle, &[1.0 / p[0]])),
            OpKind::GlobalRestyle if p[0] != 0.0 => {
                Some(Instruction::new(OpKind::GlobalRestyle, &[1.0 / p[0], -p[1] / p[0]]))
            }
            _ => None,
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.inverse().is_some()
    }

    /// Least-squares parameters of `op` mapping `source` to `target`.
    pub fn fit(op: OpKind, source: &ToySample, target: &ToySample) -> Instruction {
        match op {
            OpKind::ShiftContent => {
                let (s, t) = (source.block(Block::Content), target.block(Block::Content));
                let d = t.iter().zip(s).map(|(a, b)| a - b).sum::<f64>() / s.len() as f64;
                Instruction::new(op, &[d])
            }
            OpKind::RotateStructure => {
                let (s, t) = (source.block(Block::Structure), target.block(Block::Structure));
                let (mut cross, mut dot) = (0.0, 0.0);
                for (sp, tp) in s.chunks_exact(2).zip(t.chunks_exact(2)) {
                    cross += sp[0] * tp[1] - sp[1] * tp[0];
                    dot += sp[0] * tp[0] + sp[1] * tp[1];
                }
                Instruction::new(op, &[cross.atan2(dot)])
            }
            OpKind::SwapStyle => {
                let (s, t) = (source.block(Block::Style), target.block(Block::Style));
                let norm: f64 = s.iter().map(|v| v * v).sum();
                let g = if norm > 0.0 {
                    t.iter().zip(s.iter().rev()).map(|(a, b)| a * b).sum::<f64>() / norm
                } else {
                    1.0
                };
                Instruction::new(op, &[g])
            }
            OpKind::ChangeIdentity => {
                let t = target.block(Block::Identity);
                Instruction::new(op, &[t.iter().sum::<f64>() / t.len() as f64])
            }
            OpKind::GlobalRestyle => {
                let blocks = [Block::Structure, Block::Style, Block::Content];
                let s: Vec<f64> = blocks.iter().flat_map(|b| source.block(*b).iter().copied()).collect();
                let t: Vec<f64> = blocks.iter().flat_map(|b| target.block(*b).iter().copied()).collect();
                let n = s.len() as f64;
                let (ms, mt) = (s.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
                let var: f64 = s.iter().map(|v| (v - ms) * (v - ms)).sum();
                let cov: f64 = s.iter().zip(&t).map(|(a, b)| (a - ms) * (b - mt)).sum();
                let g = if var > 0.0 { cov / var } else { 1.0 };
                Instruction::new(op, &[g, mt - g * ms])
            }
            OpKind::IdentityNoop => Instruction::noop(),
        }
    }

    /// Squared residual of this instruction as an explanation of the pair.
    pub fn residual(&self, source: &ToySample, target: &ToySample) -> f64 {
        let pred = self.apply(source);
        pred.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Unit edit direction in feature space, taken on a fixed reference
    /// sample. `None` when the instruction does not move the reference.
    pub fn direction(&self, features: &FeatureMap) -> Option<Vec<f64>> {
        let r = reference_sample(features.dim());
        let moved = self.apply(&r);
        let delta: Vec<f64> = moved.values().iter().zip(r.values()).map(|(a, b)| a - b).collect();
        let f = features.project(&delta);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm > 1e-12).then(|| f.iter().map(|v| v / norm).collect())
    }
}

/// Non-palindromic reference sample used to define edit directions.
pub fn reference_sample(dim: usize) -> ToySample {
    ToySample::from_raw((0..dim).map(|i| 0.5 + 0.5 * (1.7 * (i as f64 + 1.0)).sin()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn random_sample(rng: &mut RngState, dim: usize) -> ToySample {
        ToySample::new((0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    fn max_diff(a: &ToySample, b: &ToySample) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn shift_touches_only_content() {
        let mut rng = RngState::new(1);
        let x = random_sample(&mut rng, 16);
        let y = Instruction::new(OpKind::ShiftContent, &[0.75]).apply(&x);
        for b in [Block::Identity, Block::Structure, Block::Style] {
            assert_eq!(x.block(b), y.block(b));
        }
        for (a, b) in x.block(Block::Content).iter().zip(y.block(Block::Content)) {
            assert_eq!(*b, a + 0.75);
        }
    }

    #[test]
    fn inverses_round_trip() {
        let mut rng = RngState::new(2);
        let instrs = [
            Instruction::new(OpKind::ShiftContent, &[-1.2]),
            Instruction::new(OpKind::RotateStructure, &[0.5]),
            Instruction::new(OpKind::SwapStyle, &[1.3]),
            Instruction::new(OpKind::GlobalRestyle, &[0.7, 0.2]),
        ];
        for dim in [8, 16, 32, 64] {
            let x = random_sample(&mut rng, dim);
            for ins in instrs {
                let back = ins.inverse().unwrap().apply(&ins.apply(&x));
                assert!(max_diff(&back, &x) < 1e-12, "{:?}", ins.op_kind);
            }
        }
        assert!(Instruction::new(OpKind::ChangeIdentity, &[0.3]).inverse().is_none());
        assert!(Instruction::noop().inverse().is_none());
        assert!(Instruction::new(OpKind::GlobalRestyle, &[0.0, 1.0]).inverse().is_none());
    }

    #[test]
    fn fits_recover_parameters() {
        let mut rng = RngState::new(3);
        let instrs = [
            Instruction::new(OpKind::ShiftContent, &[0.9]),
            Instruction::new(OpKind::RotateStructure, &[-0.8]),
            Instruction::new(OpKind::SwapStyle, &[0.6]),
            Instruction::new(OpKind::ChangeIdentity, &[-0.4]),
            Instruction::new(OpKind::GlobalRestyle, &[1.4, -0.3]),
        ];
        for dim in [8, 64] {
            let x = random_sample(&mut rng, dim);
            for ins in instrs {
                let y = ins.apply(&x);
                let fit = Instruction::fit(ins.op_kind, &x, &y);
                for (a, b) in fit.params.iter().zip(ins.params) {
                    assert!((a - b).abs() < 1e-9, "{:?}: {a} vs {b}", ins.op_kind);
                }
                assert!(fit.residual(&x, &y) < 1e-20);
            }
        }
    }

    #[test]
    fn encoding_is_one_hot_plus_params() {
        let e = Instruction::new(OpKind::SwapStyle, &[0.5]).encode();
        assert_eq!(e, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn noop_has_no_direction() {
        let fm = FeatureMap::new(8);
        assert!(Instruction::noop().direction(&fm).is_none());
        let d = Instruction::new(OpKind::ShiftContent, &[1.0]).direction(&fm).unwrap();
        assert!((d.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

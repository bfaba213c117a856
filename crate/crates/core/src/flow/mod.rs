//! Straight-path flow matching: interpolation, the joint velocity/reward
//! objective and Euler samplers.
//!
//! Convention: `x_t = (1 - t) x1 + t ε`, so data sits at `t = 0`, noise at
//! `t = 1` and the regression target is `ε - x1`. Sampling integrates from
//! `t = 1` down to `t = 0`.

mod loss;
mod sampler;

pub use loss::{
    estimate_x1, fm_loss, interpolate, joint_loss, joint_loss_value, loss_nodes, reward_loss, CfgDrop, FlowPoint,
    LossBatch, LossNodes, LossValue, RewardId, RewardReport, RewardSpec, RewardTerm, DEFAULT_T_REWARD, P_DROP_BOTH,
    P_DROP_IMAGE, P_DROP_TEXT,
};
pub use sampler::{
    endpoint_errors, fresh_noise, guided_velocity, integrate, sample, sample_batch, ExecField, NoiseReference,
    NoiseSource, SampleContext, Sampled, SamplerConfig, SamplerMode, VelocityField, TEACHER_STEPS,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetConfig, VelocityNet};
    use crate::numerics::RngState;
    use crate::toydata::{gen_pairs, EditPair, GenSpec, SourceKind};

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let mut net = VelocityNet::init(NetConfig::new(8).with_width(10), &RngState::new(1)).unwrap();
        let pid = net.params.index_of("trunk.out.w").unwrap();
        net.params.set(pid, RngState::new(2).normal_tensor(&[10, 8], 0.4));
        let ps = gen_pairs(&GenSpec::new(SourceKind::Specialist, 4, &[8]), &RngState::new(3)).unwrap();
        let refs: Vec<&EditPair> = ps.iter().collect();
        let eps = RngState::new(4).normal_tensor(&[4, 8], 1.0);
        let drops = [CfgDrop::NONE, CfgDrop { image: false, text: true }, CfgDrop::NONE, CfgDrop::NONE];
        let batch = LossBatch::from_pairs(&refs, &[0.1, 0.3, 0.45, 0.8], &[1.0, 0.7, 1.3, 1.0], eps, &drops, false)
            .unwrap();
        let specs = RewardSpec::all(0.5);
        let value = joint_loss(&net, &batch, &specs).unwrap();
        assert!(value.reward_terms.iter().any(|&r| r > 0.0));
        let h = 1e-5;
        let mut rng = RngState::new(5);
        for p in 0..net.params.len() {
            for _ in 0..2 {
                let k = rng.index(net.params.get(p).len());
                let mut plus = net.clone();
                plus.params.get_mut(p).data_mut()[k] += h;
                let mut minus = net.clone();
                minus.params.get_mut(p).data_mut()[k] -= h;
                let fd = (joint_loss_value(&plus, &batch, &specs).unwrap()
                    - joint_loss_value(&minus, &batch, &specs).unwrap())
                    / (2.0 * h);
                let an = value.grads[p].data()[k];
                let scale = fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= 1e-4 * scale || (fd - an).abs() < 1e-10,
                    "{}[{k}]: fd {fd} vs {an}",
                    net.params.names()[p]
                );
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use super::timestep::TimestepDistribution;
use crate::error::{Error, Result};
use crate::flow::{estimate_x1, joint_loss, reward_loss, CfgDrop, LossBatch, RewardSpec};
use crate::model::{CondBatch, FloatExec, VelocityNet};
use crate::numerics::RngState;
use crate::toydata::EditPair;
use crate::Tensor;

/// Mean and standard error of a Monte-Carlo estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub variance: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std_err: (variance / n).sqrt(), variance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub draws: usize,
    /// Importance-weighted loss under the adaptive distribution.
    pub weighted: Estimate,
    /// Plain loss under uniform timesteps.
    pub uniform: Estimate,
    /// `|weighted - uniform| / combined standard error`.
    pub z: f64,
    /// Per-draw loss variance, weighted over uniform.
    pub loss_variance_ratio: f64,
    pub gradient_draws: usize,
    /// Per-draw gradient-estimator variance (trace of the covariance), weighted over uniform.
    pub gradient_variance_ratio: f64,
}

impl UnbiasednessReport {
    pub fn within(&self, standard_errors: f64) -> bool {
        self.z <= standard_errors
    }
}

struct Draw {
    record: usize,
    t: f64,
    weight: f64,
}

fn draws(n: usize, records: usize, dist: Option<&TimestepDistribution>, rng: &RngState) -> Vec<Draw> {
    (0..n)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let record = r.index(records);
            match dist {
                Some(d) => {
                    let s = d.sample(&mut r);
                    Draw { record, t: s.t, weight: s.weight }
                }
                None => Draw { record, t: r.uniform(), weight: 1.0 },
            }
        })
        .collect()
}

fn noise_for(rng: &RngState, i: usize, dim: usize) -> Tensor {
    rng.fork_named("noise").fork(i as u64).normal_tensor(&[1, dim], 1.0)
}

/// Per-draw (unweighted) joint losses, evaluated in chunks.
fn losses(net: &VelocityNet, data: &[EditPair], ds: &[Draw], specs: &[RewardSpec], rng: &RngState) -> Result<Vec<f64>> {
    let d = net.dim();
    let mut out = Vec::with_capacity(ds.len());
    for (c, chunk) in ds.chunks(512).enumerate() {
        let base = c * 512;
        let b = chunk.len();
        let mut x_t = Tensor::zeros(&[b, d]);
        let mut x0 = Tensor::zeros(&[b, d]);
        let mut u = Tensor::zeros(&[b, d]);
        let mut cond = CondBatch::new(false);
        for (k, dr) in chunk.iter().enumerate() {
            let p = &data[dr.record];
            let eps = noise_for(rng, base + k, d);
            for j in 0..d {
                let (x1, e) = (p.target.values()[j], eps.data()[j]);
                x_t.row_slice_mut(k)[j] = (1.0 - dr.t) * x1 + dr.t * e;
                u.row_slice_mut(k)[j] = e - x1;
            }
            x0.row_slice_mut(k).copy_from_slice(p.source.values());
            cond.push(&p.meta, &p.instruction, dr.t, false, None)?;
        }
        let v = net.velocity(&x_t, &x0, &vec![false; b], &cond, &FloatExec)?;
        for (k, dr) in chunk.iter().enumerate() {
            let p = &data[dr.record];
            let fm = v.row_slice(k).iter().zip(u.row_slice(k)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
            let xt = Tensor::row(x_t.row_slice(k).to_vec());
            let vk = Tensor::row(v.row_slice(k).to_vec());
            let x_hat = estimate_x1(&xt, dr.t, &vk)?;
            let r = reward_loss(p.source.values(), x_hat.data(), &p.meta.tags, dr.t, specs)?;
            out.push(fm + r.total);
        }
    }
    Ok(out)
}

/// Trace of the covariance of per-draw gradient estimators `weight * ∇loss`.
fn gradient_variance(
    net: &VelocityNet,
    data: &[EditPair],
    ds: &[Draw],
    specs: &[RewardSpec],
    rng: &RngState,
) -> Result<f64> {
    let mut sum: Vec<Tensor> = net.params.shapes().iter().map(|s| Tensor::zeros(s)).collect();
    let mut sq = 0.0;
    for (i, dr) in ds.iter().enumerate() {
        let p = &data[dr.record];
        let eps = noise_for(rng, i, net.dim());
        let batch = LossBatch::from_pairs(&[p], &[dr.t], &[dr.weight / p.weight], eps, &[CfgDrop::NONE], false)?;
        let g = joint_loss(net, &batch, specs)?.grads;
        sq += g.iter().map(|t| t.sq_norm()).sum::<f64>();
        for (s, gi) in sum.iter_mut().zip(&g) {
            s.add_assign(gi)?;
        }
    }
    let n = ds.len() as f64;
    let mean_sq: f64 = sum.iter().map(|s| s.sq_norm()).sum::<f64>() / (n * n);
    Ok((sq / n - mean_sq).max(0.0) * n / (n - 1.0).max(1.0))
}

/// Compares the importance-weighted loss under `dist` with the plain loss
/// under uniform timesteps on a frozen net. Gradient variances use the first
/// `gradient_draws` draws of each estimator.
pub fn unbiasedness_check(
    net: &VelocityNet,
    dataset: &[EditPair],
    dist: &TimestepDistribution,
    n_draws: usize,
    gradient_draws: usize,
    specs: &[RewardSpec],
    rng: &RngState,
) -> Result<UnbiasednessReport> {
    if dataset.is_empty() || n_draws < 2 {
        return Err(Error::contract("unbiasedness check needs records and at least two draws"));
    }
    let wr = rng.fork_named("weighted");
    let ur = rng.fork_named("uniform");
    let wd = draws(n_draws, dataset.len(), Some(dist), &wr);
    let ud = draws(n_draws, dataset.len(), None, &ur);
    let wl: Vec<f64> = losses(net, dataset, &wd, specs, &wr)?.iter().zip(&wd).map(|(l, d)| l * d.weight).collect();
    let ul = losses(net, dataset, &ud, specs, &ur)?;
    let weighted = Estimate::of(&wl);
    let uniform = Estimate::of(&ul);
    let combined = (weighted.std_err.powi(2) + uniform.std_err.powi(2)).sqrt();
    let gn = gradient_draws.min(n_draws);
    let gradient_variance_ratio = if gn >= 2 {
        gradient_variance(net, dataset, &wd[..gn], specs, &wr)? / gradient_variance(net, dataset, &ud[..gn], specs, &ur)?
    } else {
        f64::NAN
    };
    Ok(UnbiasednessReport {
        draws: n_draws,
        weighted,
        uniform,
        z: (weighted.mean - uniform.mean).abs() / combined,
        loss_variance_ratio: weighted.variance / uniform.variance,
        gradient_draws: gn,
        gradient_variance_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::toydata::{gen_pairs, GenSpec, SourceKind};

    fn setup() -> (VelocityNet, Vec<EditPair>) {
        let mut net = VelocityNet::init(NetConfig::new(8).with_width(32), &RngState::new(1)).unwrap();
        let pid = net.params.index_of("trunk.out.w").unwrap();
        net.params.set(pid, RngState::new(2).normal_tensor(&[32, 8], 0.2));
        let data = gen_pairs(&GenSpec::new(SourceKind::Specialist, 200, &[8]), &RngState::new(3)).unwrap();
        (net, data)
    }

    #[test]
    fn uniform_distribution_agrees() {
        let (net, data) = setup();
        let r = unbiasedness_check(&net, &data, &TimestepDistribution::default(), 4000, 0, &[], &RngState::new(4))
            .unwrap();
        assert!(r.within(2.0), "{r:?}");
    }

    #[test]
    fn skewed_distribution_agrees_after_weighting() {
        let (net, data) = setup();
        let raw: Vec<f64> = (0..32).map(|i| if i < 4 { 10.0 } else { 1.0 }).collect();
        let dist = TimestepDistribution::from_probs(&raw).unwrap();
        let r = unbiasedness_check(&net, &data, &dist, 10_000, 50, &RewardSpec::all(0.1), &RngState::new(5)).unwrap();
        assert!(r.within(2.0), "{r:?}");
        assert!(r.gradient_variance_ratio.is_finite() && r.gradient_variance_ratio > 0.0);
    }
}

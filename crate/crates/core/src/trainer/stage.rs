use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::timestep::TimestepDistribution;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, joint_loss, CfgDrop, LossBatch, RewardId, RewardSpec, DEFAULT_T_REWARD};
use crate::model::VelocityNet;
use crate::numerics::RngState;
use crate::toydata::{plan_buckets, EditPair, TailPolicy};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

fn default_t_reward() -> f64 {
    DEFAULT_T_REWARD
}

fn default_true() -> bool {
    true
}

fn default_min_lr() -> f64 {
    0.05
}

/// One training stage. Reward weights are ordered identity, structure, style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub token_budget: usize,
    #[serde(default)]
    pub t2i_mix_fraction: f64,
    #[serde(default)]
    pub quality_floor: f64,
    #[serde(default)]
    pub reward_lambda: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_t_reward")]
    pub t_reward: f64,
    /// Adapt the timestep distribution from observed gradient norms.
    #[serde(default = "default_true")]
    pub adaptive_timesteps: bool,
    /// Final learning rate of the cosine schedule as a fraction of `lr`.
    #[serde(default = "default_min_lr")]
    pub min_lr_fraction: f64,
    /// Steps between snapshot records; 0 writes only the final one.
    #[serde(default)]
    pub eval_every: usize,
}

impl StageConfig {
    pub fn new(stage: Stage, steps: usize, seed: u64) -> Self {
        Self {
            stage,
            steps,
            lr: 1e-3,
            token_budget: 256,
            t2i_mix_fraction: 0.0,
            quality_floor: 0.0,
            reward_lambda: [0.0; 3],
            seed,
            t_reward: DEFAULT_T_REWARD,
            adaptive_timesteps: true,
            min_lr_fraction: default_min_lr(),
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.token_budget == 0 {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        if !unit(self.t2i_mix_fraction) || !unit(self.quality_floor) || !unit(self.t_reward) || !unit(self.min_lr_fraction)
        {
            return Err(Error::Config("t2i_mix_fraction, quality_floor, t_reward and min_lr_fraction lie in [0, 1]".into()));
        }
        if self.reward_lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("reward weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn reward_specs(&self) -> Vec<RewardSpec> {
        RewardId::ALL
            .iter()
            .map(|&id| RewardSpec { id, lambda: self.reward_lambda[id.index()], t_reward: self.t_reward })
            .collect()
    }

    /// Cosine decay from `lr` to `min_lr_fraction * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = if self.steps <= 1 { 0.0 } else { step as f64 / (self.steps - 1) as f64 };
        let f = self.min_lr_fraction + (1.0 - self.min_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * f
    }
}

/// Checks a pretrain → finetune sequence.
pub fn validate_schedule(stages: &[StageConfig]) -> Result<()> {
    let mut seen_pretrain = None;
    for s in stages {
        s.validate()?;
        match s.stage {
            Stage::Pretrain => seen_pretrain = Some(s.quality_floor),
            Stage::Finetune => {
                if let Some(pf) = seen_pretrain {
                    if s.quality_floor < pf {
                        return Err(Error::Config(format!(
                            "finetune quality_floor {} is below the pretrain floor {pf}",
                            s.quality_floor
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per-step metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub fm_term: f64,
    pub reward_terms: BTreeMap<RewardId, f64>,
    pub bin: usize,
    pub weight: f64,
}

/// Periodic snapshot: timestep-bin state and a fixed-probe loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub step: usize,
    pub stage: Stage,
    pub impacts: Vec<f64>,
    pub probs: Vec<f64>,
    pub probe_fm_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Snapshot(SnapshotRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Records kept after the quality filter.
    pub kept_records: usize,
    pub filtered_out: usize,
    /// Batches trained without `x0`.
    pub x0_absent_batches: usize,
    pub batch_dims: Vec<usize>,
}

impl TrainReport {
    pub fn step_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Snapshot(_) => None,
        })
    }
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Splits `steps` across dims in proportion to record counts (largest remainder).
fn allocate_steps(counts: &BTreeMap<usize, usize>, steps: usize) -> BTreeMap<usize, usize> {
    let total: usize = counts.values().sum();
    let mut out: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rem: Vec<(f64, usize)> = Vec::new();
    let mut used = 0;
    for (&dim, &n) in counts {
        let exact = steps as f64 * n as f64 / total as f64;
        let base = exact.floor() as usize;
        out.insert(dim, base);
        used += base;
        rem.push((exact - base as f64, dim));
    }
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, dim) in rem.into_iter().take(steps - used) {
        *out.get_mut(&dim).expect("allocated") += 1;
    }
    out
}

/// Fixed probe batch for snapshot losses: up to 64 records, evenly spaced t.
fn probe_batch(data: &[&EditPair]) -> Result<Option<LossBatch>> {
    let Some(first) = data.first() else { return Ok(None) };
    let d = first.dim();
    let members: Vec<&EditPair> = data.iter().copied().filter(|p| p.dim() == d).take(64).collect();
    let n = members.len();
    let t: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let eps = RngState::new(0x9e0be).normal_tensor(&[n, d], 1.0);
    LossBatch::from_pairs(&members, &t, &vec![1.0; n], eps, &vec![CfgDrop::NONE; n], false).map(Some)
}

/// Runs one training stage in place.
///
/// Records below `quality_floor` are dropped first. Steps are split across
/// dimension buckets in proportion to their sizes and run in increasing
/// dimension order; within a bucket, batches come from `plan_buckets` over a
/// fresh shuffle each pass. Each batch draws one timestep bin and carries its
/// importance weight; a `t2i_mix_fraction` share of batches trains without
/// `x0`.
pub fn train_stage(
    net: &mut VelocityNet,
    dataset: &[EditPair],
    cfg: &StageConfig,
    dist: &mut TimestepDistribution,
) -> Result<TrainReport> {
    cfg.validate()?;
    let kept: Vec<&EditPair> = dataset.iter().filter(|p| p.quality >= cfg.quality_floor).collect();
    let mut report = TrainReport { kept_records: kept.len(), filtered_out: dataset.len() - kept.len(), ..Default::default() };
    if cfg.steps == 0 {
        return Ok(report);
    }
    if kept.is_empty() {
        return Err(Error::contract(format!(
            "no records left after the quality filter (floor {})",
            cfg.quality_floor
        )));
    }
    if let Some(p) = kept.iter().find(|p| p.dim() != net.dim()) {
        return Err(Error::contract(format!("record {} has dim {} but the net is dim {}", p.id, p.dim(), net.dim())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &kept {
        *counts.entry(p.dim()).or_default() += 1;
    }
    let allocation = allocate_steps(&counts, cfg.steps);
    let specs = cfg.reward_specs();
    let rng = RngState::new(cfg.seed).fork_named(cfg.stage.name());
    let mut opt = Adam::new(&net.params);
    let probe = probe_batch(&kept)?;
    let mut step = 0;

    for (&dim, &dim_steps) in &allocation {
        let members: Vec<EditPair> = kept.iter().filter(|p| p.dim() == dim).map(|p| (*p).clone()).collect();
        let mut pass = 0u64;
        let mut queue = Vec::new().into_iter();
        for _ in 0..dim_steps {
            let batch_idx = match queue.next() {
                Some(b) => b,
                None => {
                    let mut order: Vec<usize> = (0..members.len()).collect();
                    rng.fork_named("shuffle").fork(dim as u64).fork(pass).shuffle(&mut order);
                    pass += 1;
                    let shuffled: Vec<EditPair> = order.iter().map(|&i| members[i].clone()).collect();
                    let plan = plan_buckets(&shuffled, cfg.token_budget, TailPolicy::Keep)?;
                    let batches: Vec<Vec<usize>> =
                        plan.into_iter().map(|b| b.indices.iter().map(|&i| order[i]).collect()).collect();
                    queue = batches.into_iter();
                    queue.next().expect("nonempty bucket yields a batch")
                }
            };
            let pairs: Vec<&EditPair> = batch_idx.iter().map(|&i| &members[i]).collect();
            let mut srng = rng.fork(step as u64);
            let x0_absent = cfg.t2i_mix_fraction > 0.0 && srng.bernoulli(cfg.t2i_mix_fraction);
            let bin = dist.sample_bin(&mut srng);
            let weight = dist.weight(bin);
            let t: Vec<f64> = pairs.iter().map(|_| dist.t_in_bin(bin, &mut srng)).collect();
            let drops: Vec<CfgDrop> = pairs.iter().map(|_| CfgDrop::draw(&mut srng)).collect();
            let eps: Tensor = srng.normal_tensor(&[pairs.len(), dim], 1.0);
            let batch = LossBatch::from_pairs(&pairs, &t, &vec![weight; pairs.len()], eps, &drops, x0_absent)?;
            let value = joint_loss(net, &batch, &specs)?;
            if !value.loss.is_finite() {
                return Err(Error::contract(format!("non-finite loss at step {step}")));
            }
            opt.step(&mut net.params, &value.grads, cfg.lr_at(step))?;
            if cfg.adaptive_timesteps {
                let g2: f64 = value.grads.iter().map(|g| g.sq_norm()).sum::<f64>() / (weight * weight);
                dist.update(bin, g2)?;
            }
            report.x0_absent_batches += x0_absent as usize;
            report.batch_dims.push(dim);
            report.log.push(LogRecord::Step(StepRecord {
                step,
                stage: cfg.stage,
                loss: value.loss,
                fm_term: value.fm_term,
                reward_terms: RewardId::ALL.iter().map(|&id| (id, value.reward_terms[id.index()])).collect(),
                bin,
                weight,
            }));
            step += 1;
            let last = step == cfg.steps;
            if last || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                let probe_fm_loss = match &probe {
                    Some(b) => fm_loss(net, b)?.loss,
                    None => f64::NAN,
                };
                debug!("{} step {step}: loss {:.4e}, probe {:.4e}", cfg.stage.name(), value.loss, probe_fm_loss);
                report.log.push(LogRecord::Snapshot(SnapshotRecord {
                    step,
                    stage: cfg.stage,
                    impacts: dist.impact.clone(),
                    probs: dist.probs.clone(),
                    probe_fm_loss,
                }));
            }
        }
    }
    info!("{} finished {} steps on {} records", cfg.stage.name(), cfg.steps, kept.len());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::toydata::{gen_pairs, GenSpec, SourceKind};

    fn small_net(dim: usize) -> VelocityNet {
        VelocityNet::init(NetConfig::new(dim).with_width(16), &RngState::new(1)).unwrap()
    }

    fn data(n: usize, dims: &[usize]) -> Vec<EditPair> {
        gen_pairs(&GenSpec::new(SourceKind::Synthesized, n, dims), &RngState::new(2)).unwrap()
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut net = small_net(8);
        let before = net.clone();
        let r = train_stage(&mut net, &data(10, &[8]), &StageConfig::new(Stage::Pretrain, 0, 3), &mut Default::default())
            .unwrap();
        assert_eq!(net, before);
        assert!(r.log.is_empty());
    }

    #[test]
    fn full_t2i_mix_never_sees_x0() {
        let mut net = small_net(8);
        let mut cfg = StageConfig::new(Stage::Pretrain, 12, 4);
        cfg.t2i_mix_fraction = 1.0;
        let r = train_stage(&mut net, &data(40, &[8]), &cfg, &mut Default::default()).unwrap();
        assert_eq!(r.x0_absent_batches, 12);
        assert_eq!(r.step_records().count(), 12);
    }

    #[test]
    fn quality_filter() {
        let mut net = small_net(8);
        let d = data(60, &[8]);
        let mut cfg = StageConfig::new(Stage::Finetune, 2, 5);
        cfg.quality_floor = 0.7;
        let r = train_stage(&mut net, &d, &cfg, &mut Default::default()).unwrap();
        assert_eq!(r.kept_records, d.iter().filter(|p| p.quality >= 0.7).count());
        assert!(r.kept_records <= d.len());
        cfg.quality_floor = 0.95;
        assert!(matches!(train_stage(&mut net, &d, &cfg, &mut Default::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn finetune_floor_below_pretrain_is_rejected() {
        let mut pre = StageConfig::new(Stage::Pretrain, 1, 0);
        pre.quality_floor = 0.5;
        let mut fine = StageConfig::new(Stage::Finetune, 1, 0);
        fine.quality_floor = 0.4;
        assert!(validate_schedule(&[pre.clone(), fine.clone()]).is_err());
        fine.quality_floor = 0.6;
        assert!(validate_schedule(&[pre, fine]).is_ok());
    }

    #[test]
    fn curriculum_and_determinism() {
        let d = data(100, &[8]);
        let cfg = StageConfig::new(Stage::Pretrain, 15, 6);
        let mut a = small_net(8);
        let ra = train_stage(&mut a, &d, &cfg, &mut Default::default()).unwrap();
        let mut b = small_net(8);
        train_stage(&mut b, &d, &cfg, &mut Default::default()).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert!(ra.batch_dims.windows(2).all(|w| w[0] <= w[1]));
        let line = serde_json::to_string(&ra.log[0]).unwrap();
        for key in ["step", "stage", "loss", "fm_term", "reward_terms", "bin", "weight"] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
    }

    #[test]
    fn step_allocation_is_proportional() {
        let counts: BTreeMap<usize, usize> = [(8, 30), (16, 10)].into_iter().collect();
        let a = allocate_steps(&counts, 9);
        assert_eq!(a[&8] + a[&16], 9);
        assert_eq!(a[&8], 7);
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok = r#"{"stage":"pretrain","steps":10,"lr":0.001,"token_budget":256,"seed":1}"#;
        let cfg: StageConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.t_reward, 0.5);
        let bad = r#"{"stage":"pretrain","steps":10,"lr":0.001,"token_budget":256,"seed":1,"momentum":0.9}"#;
        assert!(serde_json::from_str::<StageConfig>(bad).is_err());
    }

    #[test]
    fn training_reduces_probe_loss() {
        let d = gen_pairs(&GenSpec::new(SourceKind::TraditionalOp, 200, &[8]), &RngState::new(7)).unwrap();
        let mut net = VelocityNet::init(NetConfig::new(8).with_width(64), &RngState::new(8)).unwrap();
        let mut cfg = StageConfig::new(Stage::Pretrain, 1000, 9);
        cfg.eval_every = 200;
        let r = train_stage(&mut net, &d, &cfg, &mut Default::default()).unwrap();
        let probes: Vec<f64> = r
            .log
            .iter()
            .filter_map(|l| match l {
                LogRecord::Snapshot(s) => Some(s.probe_fm_loss),
                _ => None,
            })
            .collect();
        assert_eq!(probes.len(), 5);
        assert!(probes.last().unwrap() < &(0.7 * probes[0]), "{probes:?}");
    }
}

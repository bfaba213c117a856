use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CondBatch, FloatExec, VelocityNet};
use crate::numerics::RngState;
use crate::toydata::{Block, EditPair, Tag, TagSet};
use crate::{Graph, NodeId, Tensor};

/// A point on the straight path between data `x1` (t = 0) and noise (t = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPoint {
    pub x_t: Tensor,
    pub t: f64,
    pub eps: Tensor,
    /// `eps - x1`, the time derivative of `x_t`.
    pub velocity: Tensor,
}

pub fn interpolate(x1: &Tensor, eps: &Tensor, t: f64) -> Result<FlowPoint> {
    if x1.shape() != eps.shape() {
        return Err(Error::shape(format!("x1 {:?} vs eps {:?}", x1.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("timestep {t} outside [0, 1]")));
    }
    let x_t = x1.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?;
    let velocity = eps.sub(x1)?;
    Ok(FlowPoint { x_t, t, eps: eps.clone(), velocity })
}

/// `x_t - t v`: the data endpoint implied by velocity `v`.
pub fn estimate_x1(x_t: &Tensor, t: f64, v_hat: &Tensor) -> Result<Tensor> {
    x_t.zip_map(v_hat, |x, v| x - t * v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardId {
    IdentityPreserve,
    StructurePreserve,
    StylePreserve,
}

impl RewardId {
    pub const ALL: [RewardId; 3] = [RewardId::IdentityPreserve, RewardId::StructurePreserve, RewardId::StylePreserve];

    pub fn tag(self) -> Tag {
        match self {
            RewardId::IdentityPreserve => Tag::IdentityPreserve,
            RewardId::StructurePreserve => Tag::StructurePreserve,
            RewardId::StylePreserve => Tag::StylePreserve,
        }
    }

    pub fn block(self) -> Block {
        self.tag().block().expect("preserve tags guard a block")
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const DEFAULT_T_REWARD: f64 = 0.5;

fn default_t_reward() -> f64 {
    DEFAULT_T_REWARD
}

/// Block-preservation reward: `lambda * MSE(x̂1[block], x0[block])`, active
/// only when the record carries the matching preserve tag and `t <= t_reward`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub id: RewardId,
    pub lambda: f64,
    #[serde(default = "default_t_reward")]
    pub t_reward: f64,
}

impl RewardSpec {
    pub fn new(id: RewardId, lambda: f64) -> Self {
        Self { id, lambda, t_reward: DEFAULT_T_REWARD }
    }

    /// One spec per reward, all with weight `lambda`.
    pub fn all(lambda: f64) -> Vec<Self> {
        RewardId::ALL.iter().map(|&id| Self::new(id, lambda)).collect()
    }

    pub fn gate(&self, tags: &TagSet, t: f64) -> bool {
        tags.contains(self.id.tag()) && t <= self.t_reward
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardTerm {
    pub id: RewardId,
    pub value: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardReport {
    pub total: f64,
    pub terms: Vec<RewardTerm>,
}

/// Reward of one record.
pub fn reward_loss(x0: &[f64], x_hat1: &[f64], tags: &TagSet, t: f64, specs: &[RewardSpec]) -> Result<RewardReport> {
    if x0.len() != x_hat1.len() {
        return Err(Error::shape(format!("x0 has {} entries, x̂1 {}", x0.len(), x_hat1.len())));
    }
    let mut total = 0.0;
    let terms = specs
        .iter()
        .map(|s| {
            let active = s.gate(tags, t);
            let value = if active {
                let r = s.id.block().range(x0.len());
                let n = r.len() as f64;
                s.lambda * r.map(|j| (x_hat1[j] - x0[j]).powi(2)).sum::<f64>() / n
            } else {
                0.0
            };
            total += value;
            RewardTerm { id: s.id, value, active }
        })
        .collect();
    Ok(RewardReport { total, terms })
}

/// Classifier-free-guidance condition dropout of one record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CfgDrop {
    pub image: bool,
    pub text: bool,
}

pub const P_DROP_IMAGE: f64 = 0.1;
pub const P_DROP_TEXT: f64 = 0.1;
pub const P_DROP_BOTH: f64 = 0.05;

impl CfgDrop {
    pub const NONE: CfgDrop = CfgDrop { image: false, text: false };

    /// Image only with 0.1, text only with 0.1, both with 0.05.
    pub fn draw(rng: &mut RngState) -> Self {
        let u = rng.uniform();
        if u < P_DROP_BOTH {
            CfgDrop { image: true, text: true }
        } else if u < P_DROP_BOTH + P_DROP_IMAGE {
            CfgDrop { image: true, text: false }
        } else if u < P_DROP_BOTH + P_DROP_IMAGE + P_DROP_TEXT {
            CfgDrop { image: false, text: true }
        } else {
            CfgDrop::NONE
        }
    }
}

/// A dimension-homogeneous training batch with its noise and timesteps drawn.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub x1: Tensor,
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    /// Record weight times timestep importance weight.
    pub weights: Vec<f64>,
    /// True where the net does not see `x0` (image dropout or generation-only batches).
    pub drop_image: Vec<bool>,
    pub tags: Vec<TagSet>,
    pub cond: CondBatch,
}

impl LossBatch {
    /// `t_weights` multiply each record's own weight. With `x0_absent` every
    /// record trains without its source sample.
    pub fn from_pairs(
        pairs: &[&EditPair],
        t: &[f64],
        t_weights: &[f64],
        eps: Tensor,
        drops: &[CfgDrop],
        x0_absent: bool,
    ) -> Result<Self> {
        let b = pairs.len();
        if b == 0 {
            return Err(Error::contract("empty loss batch"));
        }
        if t.len() != b || t_weights.len() != b || drops.len() != b {
            return Err(Error::shape("per-record arrays disagree with the batch size"));
        }
        let d = pairs[0].dim();
        if pairs.iter().any(|p| p.dim() != d) {
            return Err(Error::contract("loss batch must be dimension-homogeneous"));
        }
        if eps.shape() != [b, d] {
            return Err(Error::shape(format!("noise {:?} for a [{b}, {d}] batch", eps.shape())));
        }
        let rows = |f: &dyn Fn(&EditPair) -> &[f64]| -> Result<Tensor> {
            Tensor::matrix(b, d, pairs.iter().flat_map(|p| f(p).iter().copied()).collect())
        };
        let mut cond = CondBatch::new(false);
        for ((p, &tv), drop) in pairs.iter().zip(t).zip(drops) {
            cond.push(&p.meta, &p.instruction, tv, drop.text, None)?;
        }
        Ok(Self {
            x1: rows(&|p| p.target.values())?,
            x0: rows(&|p| p.source.values())?,
            eps,
            t: t.to_vec(),
            weights: pairs.iter().zip(t_weights).map(|(p, w)| p.weight * w).collect(),
            drop_image: drops.iter().map(|dr| dr.image || x0_absent).collect(),
            tags: pairs.iter().map(|p| p.meta.tags).collect(),
            cond,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x1.cols()
    }

    /// `x_t` for every record.
    pub fn x_t(&self) -> Tensor {
        let d = self.dim();
        let mut out = self.x1.clone();
        for (i, &t) in self.t.iter().enumerate() {
            let e = self.eps.row_slice(i);
            for (j, v) in out.row_slice_mut(i).iter_mut().enumerate() {
                *v = (1.0 - t) * *v + t * e[j];
            }
            debug_assert_eq!(e.len(), d);
        }
        out
    }

    pub fn target_velocity(&self) -> Tensor {
        self.eps.sub(&self.x1).expect("same shapes by construction")
    }

    /// Whether reward `spec` applies to record `i`.
    pub fn reward_active(&self, spec: &RewardSpec, i: usize) -> bool {
        !self.drop_image[i] && spec.gate(&self.tags[i], self.t[i])
    }
}

/// Graph nodes of the joint objective.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub loss: NodeId,
    pub fm: NodeId,
    /// One node per spec with a positive weight and at least one active record.
    pub rewards: Vec<(RewardId, NodeId)>,
}

/// Builds `(1/B) Σ_r w_r [mean_j (v - (ε - x1))² + Σ_i λ_i gate_ri MSE_block_i(x̂1, x0)]`
/// on top of a velocity node `v`. Reward branches with nothing active are not
/// built at all, so without rewards the loss node is the flow-matching node.
pub fn loss_nodes(g: &mut Graph, v: NodeId, batch: &LossBatch, specs: &[RewardSpec]) -> Result<LossNodes> {
    let (b, d) = (batch.len(), batch.dim());
    if g.value(v).shape() != [b, d] {
        return Err(Error::shape(format!("velocity {:?} for a [{b}, {d}] batch", g.value(v).shape())));
    }
    let u = g.constant(batch.target_velocity());
    let diff = g.sub(v, u)?;
    let sq = g.mul(diff, diff)?;
    let row_w = g.constant(Tensor::column(batch.weights.iter().map(|w| w / (b * d) as f64).collect()));
    let fm = g.mul(sq, row_w)?;
    let fm = g.sum(fm);

    let mut rewards = Vec::new();
    let mut loss = fm;
    let mut x_hat = None;
    for spec in specs {
        if spec.lambda <= 0.0 || !(0..b).any(|i| batch.reward_active(spec, i)) {
            continue;
        }
        let x_hat = match x_hat {
            Some(n) => n,
            None => {
                let tcol = g.constant(Tensor::column(batch.t.clone()));
                let tv = g.mul(v, tcol)?;
                let xt = g.constant(batch.x_t());
                let n = g.sub(xt, tv)?;
                x_hat = Some(n);
                n
            }
        };
        let block = spec.id.block().range(d);
        let mut mask = Tensor::zeros(&[b, d]);
        for i in 0..b {
            if batch.reward_active(spec, i) {
                let m = spec.lambda * batch.weights[i] / (b * block.len()) as f64;
                mask.row_slice_mut(i)[block.clone()].iter_mut().for_each(|e| *e = m);
            }
        }
        let x0 = g.constant(batch.x0.clone());
        let r = g.sub(x_hat, x0)?;
        let r2 = g.mul(r, r)?;
        let mask = g.constant(mask);
        let term = g.mul(r2, mask)?;
        let term = g.sum(term);
        loss = g.add(loss, term)?;
        rewards.push((spec.id, term));
    }
    Ok(LossNodes { loss, fm, rewards })
}

/// Loss value, its terms and parameter gradients.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub loss: f64,
    pub fm_term: f64,
    /// Contribution of each reward, indexed by [`RewardId::index`].
    pub reward_terms: [f64; 3],
    /// One gradient per parameter, in parameter-store order.
    pub grads: Vec<Tensor>,
}

pub fn joint_loss(net: &VelocityNet, batch: &LossBatch, specs: &[RewardSpec]) -> Result<LossValue> {
    evaluate(net, batch, specs, true)
}

/// Plain flow-matching loss.
pub fn fm_loss(net: &VelocityNet, batch: &LossBatch) -> Result<LossValue> {
    evaluate(net, batch, &[], true)
}

/// Loss value without the backward pass.
pub fn joint_loss_value(net: &VelocityNet, batch: &LossBatch, specs: &[RewardSpec]) -> Result<f64> {
    Ok(evaluate(net, batch, specs, false)?.loss)
}

fn evaluate(net: &VelocityNet, batch: &LossBatch, specs: &[RewardSpec], grads: bool) -> Result<LossValue> {
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g);
    let v = net.build(&mut g, &bound, &batch.x_t(), &batch.x0, &batch.drop_image, &batch.cond, &FloatExec)?;
    let nodes = loss_nodes(&mut g, v, batch, specs)?;
    let mut reward_terms = [0.0; 3];
    for (id, n) in &nodes.rewards {
        reward_terms[id.index()] += g.value(*n).data()[0];
    }
    let grads = if grads { g.backward(nodes.loss)?.for_params(&net.params.shapes()) } else { Vec::new() };
    Ok(LossValue {
        loss: g.value(nodes.loss).data()[0],
        fm_term: g.value(nodes.fm).data()[0],
        reward_terms,
        grads,
    })
}

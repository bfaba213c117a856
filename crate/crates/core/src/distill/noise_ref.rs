use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    endpoint_errors, fresh_noise, integrate, NoiseReference, SampleContext, SamplerMode, VelocityField, TEACHER_STEPS,
};
use crate::numerics::{Checkpoint, CheckpointKind, RngState};
use crate::toydata::{EditPair, Tag, TaskLabel, INSTRUCTION_LEN};
use crate::trainer::Adam;
use crate::{Graph, NodeId, ParamStore, Tensor};

/// Width of the condition summary: task-label one-hot, tag multi-hot and the
/// raw instruction encoding.
pub const SUMMARY_LEN: usize = 4 + 4 + INSTRUCTION_LEN;

fn summary(ctx: &SampleContext) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ctx.len() * SUMMARY_LEN);
    for (meta, instr) in ctx.metas.iter().zip(&ctx.instrs) {
        let mut one_hot = [0.0; 4];
        one_hot[meta.task_label.index()] = 1.0;
        data.extend_from_slice(&one_hot);
        data.extend_from_slice(&meta.tags.multi_hot());
        data.extend_from_slice(&instr.encode());
    }
    debug_assert_eq!(TaskLabel::ALL.len() + Tag::ALL.len() + INSTRUCTION_LEN, SUMMARY_LEN);
    Tensor::matrix(ctx.len(), SUMMARY_LEN, data)
}

/// Two-layer GELU net mapping `(x0, condition summary)` to a starting noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRefNet {
    pub dim: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

impl NoiseRefNet {
    pub fn init(dim: usize, hidden: usize, rng: &RngState) -> Self {
        let mut rng = rng.fork_named("noise-ref-init");
        let fan_in = dim + SUMMARY_LEN;
        let mut params = ParamStore::new();
        params.push("l0.w", rng.normal_tensor(&[fan_in, hidden], 1.0 / (fan_in as f64).sqrt()));
        params.push("l0.b", Tensor::zeros(&[1, hidden]));
        params.push("l1.w", Tensor::zeros(&[hidden, dim]));
        params.push("l1.b", Tensor::zeros(&[1, dim]));
        Self { dim, hidden, params }
    }

    fn build(&self, g: &mut Graph, bound: &[NodeId], ctx: &SampleContext) -> Result<NodeId> {
        if ctx.dim() != self.dim {
            return Err(Error::shape(format!("noise reference of dim {} given dim {}", self.dim, ctx.dim())));
        }
        let x0 = g.constant(ctx.x0.clone());
        let s = g.constant(summary(ctx)?);
        let h = g.concat(&[x0, s])?;
        let h = g.matmul(h, bound[0])?;
        let h = g.add(h, bound[1])?;
        let h = g.gelu(h);
        let o = g.matmul(h, bound[2])?;
        g.add(o, bound[3])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint(CheckpointKind::NoiseReference)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let w = ckpt.get("l0.w").ok_or_else(|| Error::contract("noise reference checkpoint lacks l0.w"))?;
        let (fan_in, hidden) = w.dims2();
        if fan_in <= SUMMARY_LEN {
            return Err(Error::contract("noise reference checkpoint has a malformed first layer"));
        }
        let mut net = Self::init(fan_in - SUMMARY_LEN, hidden, &RngState::new(0));
        net.params.load_from(ckpt)?;
        Ok(net)
    }
}

impl NoiseReference for NoiseRefNet {
    fn predict(&self, ctx: &SampleContext) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.build(&mut g, &bound, ctx)?;
        let v = g.value(out).clone();
        if !v.all_finite() {
            return Err(Error::contract("noise reference produced non-finite values"));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRefConfig {
    /// Records used for best-of-K selection (the first ones of the dataset).
    pub records: usize,
    pub candidates: usize,
    pub teacher_steps: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Teacher guidance used when scoring candidate noises.
    pub w_image: f64,
    pub w_text: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseRefConfig {
    fn default() -> Self {
        Self {
            records: 256,
            candidates: 8,
            teacher_steps: TEACHER_STEPS,
            hidden: 64,
            iterations: 400,
            lr: 3e-3,
            w_image: 1.0,
            w_text: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRefReport {
    /// Full-batch regression loss after each iteration.
    pub losses: Vec<f64>,
    /// Mean endpoint error of the selected (best) candidates.
    pub best_error: f64,
    /// Mean endpoint error of the worst candidates.
    pub worst_error: f64,
}

/// Best-of-`candidates` starting noises for each record under teacher sampling.
pub fn select_noises(
    teacher: &dyn VelocityField,
    pairs: &[&EditPair],
    cfg: &NoiseRefConfig,
    rng: &RngState,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let n = pairs.len();
    let d = teacher.dim();
    let ctx = SampleContext::from_pairs(pairs)?;
    let k = cfg.candidates;
    let rows: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
    let big = ctx.subset(&rows);
    let mut noise = Tensor::zeros(&[k * n, d]);
    for c in 0..k {
        let block = fresh_noise(&rng.fork(c as u64), n, d);
        for i in 0..n {
            noise.row_slice_mut(c * n + i).copy_from_slice(block.row_slice(i));
        }
    }
    let w = vec![(cfg.w_image, cfg.w_text); k * n];
    let (x, _) = integrate(teacher, &big, SamplerMode::TeacherCfg, &w, noise.clone(), 1.0, 0.0, cfg.teacher_steps)?;
    let targets: Vec<f64> = rows.iter().flat_map(|&i| pairs[i].target.values().iter().copied()).collect();
    let errors = endpoint_errors(&x, &Tensor::matrix(k * n, d, targets)?)?;
    let mut best = Tensor::zeros(&[n, d]);
    let (mut best_err, mut worst_err) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let errs: Vec<f64> = (0..k).map(|c| errors[c * n + i]).collect();
        let b = (0..k).min_by(|&a, &b| errs[a].total_cmp(&errs[b])).expect("k >= 1");
        best.row_slice_mut(i).copy_from_slice(noise.row_slice(b * n + i));
        best_err.push(errs[b]);
        worst_err.push(errs.iter().copied().fold(f64::MIN, f64::max));
    }
    Ok((best, best_err, worst_err))
}

/// Regresses a noise-reference net onto best-of-K teacher noises.
pub fn train_noise_ref(
    teacher: &dyn VelocityField,
    dataset: &[EditPair],
    cfg: &NoiseRefConfig,
) -> Result<(NoiseRefNet, NoiseRefReport)> {
    if cfg.candidates == 0 || cfg.teacher_steps == 0 || cfg.records == 0 {
        return Err(Error::Config("noise reference needs candidates, teacher steps and records".into()));
    }
    let pairs: Vec<&EditPair> = dataset.iter().filter(|p| p.dim() == teacher.dim()).take(cfg.records).collect();
    if pairs.is_empty() {
        return Err(Error::contract(format!("no records of dim {} for the noise reference", teacher.dim())));
    }
    let rng = RngState::new(cfg.seed).fork_named("noise-ref");
    let (targets, best, worst) = select_noises(teacher, &pairs, cfg, &rng.fork_named("candidates"))?;
    let ctx = SampleContext::from_pairs(&pairs)?;
    let mut net = NoiseRefNet::init(teacher.dim(), cfg.hidden, &rng);
    let mut opt = Adam::new(&net.params);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g);
        let out = net.build(&mut g, &bound, &ctx)?;
        let tgt = g.constant(targets.clone());
        let se = g.squared_error(out, tgt)?;
        let loss = g.mean(se);
        losses.push(g.value(loss).data()[0]);
        let grads = g.backward(loss)?.for_params(&net.params.shapes());
        opt.step(&mut net.params, &grads, cfg.lr)?;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = NoiseRefReport { losses, best_error: mean(&best), worst_error: mean(&worst) };
    info!(
        "noise reference: best-of-{} error {:.4}, worst {:.4}, final loss {:.4}",
        cfg.candidates,
        report.best_error,
        report.worst_error,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok((net, report))
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CondBatch, FloatExec, LinearExec, VelocityNet};
use crate::numerics::RngState;
use crate::toydata::{EditPair, Instruction, MetaInfo, ToySample};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Three evaluations per step combined with dual guidance.
    TeacherCfg,
    /// One evaluation per step with guidance scales as inputs.
    StudentDistilled,
}

impl SamplerMode {
    pub fn evals_per_step(self) -> u64 {
        match self {
            SamplerMode::TeacherCfg => 3,
            SamplerMode::StudentDistilled => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    Fresh,
    UnifiedReference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub w_image: f64,
    pub w_text: f64,
    pub mode: SamplerMode,
    pub noise_source: NoiseSource,
}

pub const TEACHER_STEPS: usize = 75;

impl SamplerConfig {
    pub fn teacher(steps: usize, w_image: f64, w_text: f64) -> Self {
        Self { steps, w_image, w_text, mode: SamplerMode::TeacherCfg, noise_source: NoiseSource::Fresh }
    }

    pub fn student(steps: usize, w_image: f64, w_text: f64) -> Self {
        Self { steps, w_image, w_text, mode: SamplerMode::StudentDistilled, noise_source: NoiseSource::Fresh }
    }

    pub fn with_noise(mut self, noise_source: NoiseSource) -> Self {
        self.noise_source = noise_source;
        self
    }

    /// Network evaluations per sampled record.
    pub fn eval_count(&self) -> u64 {
        self.steps as u64 * self.mode.evals_per_step()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("sampler needs at least one step"));
        }
        if !(self.w_image >= 1.0 && self.w_text >= 1.0) {
            return Err(Error::contract(format!(
                "guidance scales must be >= 1, got ({}, {})",
                self.w_image, self.w_text
            )));
        }
        Ok(())
    }
}

/// Something that produces one batched velocity evaluation.
pub trait VelocityField {
    fn dim(&self) -> usize;
    /// Whether the field takes guidance scales as inputs.
    fn guided(&self) -> bool;
    fn eval(&self, x_t: &Tensor, x0: &Tensor, drop_image: &[bool], cond: &CondBatch) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn guided(&self) -> bool {
        self.config.guidance
    }

    fn eval(&self, x_t: &Tensor, x0: &Tensor, drop_image: &[bool], cond: &CondBatch) -> Result<Tensor> {
        self.velocity(x_t, x0, drop_image, cond, &FloatExec)
    }
}

/// A net whose dense layers run through a custom executor.
pub struct ExecField<'a> {
    pub net: &'a VelocityNet,
    pub exec: &'a dyn LinearExec,
}

impl VelocityField for ExecField<'_> {
    fn dim(&self) -> usize {
        self.net.config.dim
    }

    fn guided(&self) -> bool {
        self.net.config.guidance
    }

    fn eval(&self, x_t: &Tensor, x0: &Tensor, drop_image: &[bool], cond: &CondBatch) -> Result<Tensor> {
        self.net.velocity(x_t, x0, drop_image, cond, self.exec)
    }
}

/// Per-record inputs shared by every step of a sampling run.
#[derive(Clone, Debug)]
pub struct SampleContext {
    pub x0: Tensor,
    pub metas: Vec<MetaInfo>,
    pub instrs: Vec<Instruction>,
}

impl SampleContext {
    pub fn from_pairs(pairs: &[&EditPair]) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::contract("nothing to sample"));
        };
        let d = first.dim();
        if pairs.iter().any(|p| p.dim() != d) {
            return Err(Error::contract("sampling batch must be dimension-homogeneous"));
        }
        Ok(Self {
            x0: Tensor::matrix(pairs.len(), d, pairs.iter().flat_map(|p| p.source.values().iter().copied()).collect())?,
            metas: pairs.iter().map(|p| p.meta).collect(),
            instrs: pairs.iter().map(|p| p.instruction).collect(),
        })
    }

    pub fn single(x0: &ToySample, meta: &MetaInfo, instr: &Instruction) -> Self {
        Self { x0: Tensor::row(x0.values().to_vec()), metas: vec![*meta], instrs: vec![*instr] }
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x0: self.x0.select_rows(idx),
            metas: idx.iter().map(|&i| self.metas[i]).collect(),
            instrs: idx.iter().map(|&i| self.instrs[i]).collect(),
        }
    }

    fn cond(&self, t: f64, drop_text: bool, guidance: Option<&[(f64, f64)]>) -> Result<CondBatch> {
        let mut c = CondBatch::new(guidance.is_some());
        for i in 0..self.len() {
            c.push(&self.metas[i], &self.instrs[i], t, drop_text, guidance.map(|g| g[i]))?;
        }
        Ok(c)
    }
}

/// Predicts the shared starting noise for unified-reference sampling.
pub trait NoiseReference {
    fn predict(&self, ctx: &SampleContext) -> Result<Tensor>;
}

fn stack_cond(parts: &[CondBatch]) -> CondBatch {
    let mut out = CondBatch::new(false);
    for p in parts {
        out.labels.extend_from_slice(&p.labels);
        out.tags.extend_from_slice(&p.tags);
        out.instr.extend_from_slice(&p.instr);
        out.t.extend_from_slice(&p.t);
        out.drop_text.extend_from_slice(&p.drop_text);
    }
    out
}

/// Guided velocity at `(x, t)` and the evaluations spent per record.
///
/// Teacher: `v_uu + w_I (v_cu - v_uu) + w_T (v_cc - v_cu)`, subscripts marking
/// (image, text) condition presence. Student: one evaluation taking
/// `(w_I, w_T)` as input.
pub fn guided_velocity(
    field: &dyn VelocityField,
    ctx: &SampleContext,
    mode: SamplerMode,
    w: &[(f64, f64)],
    x: &Tensor,
    t: f64,
) -> Result<(Tensor, u64)> {
    let b = ctx.len();
    if w.len() != b || x.shape() != [b, ctx.dim()] {
        return Err(Error::shape("sampling state disagrees with the context"));
    }
    match mode {
        SamplerMode::StudentDistilled => {
            if !field.guided() {
                return Err(Error::contract("student sampling needs a net with guidance embeddings"));
            }
            let cond = ctx.cond(t, false, Some(w))?;
            Ok((field.eval(x, &ctx.x0, &vec![false; b], &cond)?, 1))
        }
        SamplerMode::TeacherCfg => {
            if field.guided() {
                return Err(Error::contract("teacher guidance needs a net without guidance embeddings"));
            }
            let dropped = ctx.cond(t, true, None)?;
            let full = ctx.cond(t, false, None)?;
            let cond = stack_cond(&[dropped.clone(), dropped, full]);
            let xs = Tensor::vstack(&[x, x, x])?;
            let x0s = Tensor::vstack(&[&ctx.x0, &ctx.x0, &ctx.x0])?;
            let mut drop_image = vec![true; b];
            drop_image.extend(std::iter::repeat_n(false, 2 * b));
            let v = field.eval(&xs, &x0s, &drop_image, &cond)?;
            let d = ctx.dim();
            let mut out = Tensor::zeros(&[b, d]);
            for i in 0..b {
                let (uu, cu, cc) = (v.row_slice(i), v.row_slice(b + i), v.row_slice(2 * b + i));
                let (wi, wt) = w[i];
                for (j, o) in out.row_slice_mut(i).iter_mut().enumerate() {
                    *o = uu[j] + wi * (cu[j] - uu[j]) + wt * (cc[j] - cu[j]);
                }
            }
            Ok((out, 3))
        }
    }
}

/// Euler integration from `t_from` to `t_to` over `steps` uniform steps.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    field: &dyn VelocityField,
    ctx: &SampleContext,
    mode: SamplerMode,
    w: &[(f64, f64)],
    mut x: Tensor,
    t_from: f64,
    t_to: f64,
    steps: usize,
) -> Result<(Tensor, u64)> {
    let mut evals = 0;
    let h = (t_from - t_to) / steps as f64;
    for k in 0..steps {
        let t = t_from - k as f64 * h;
        let (v, n) = guided_velocity(field, ctx, mode, w, &x, t)?;
        evals += n;
        x = x.zip_map(&v, |a, b| a - h * b)?;
    }
    Ok((x, evals))
}

/// Standard normal noise, row `i` drawn from its own fork so a record's noise
/// does not depend on its batch neighbours.
pub fn fresh_noise(rng: &RngState, rows: usize, dim: usize) -> Tensor {
    let data = (0..rows)
        .flat_map(|i| {
            let mut r = rng.fork(i as u64);
            (0..dim).map(move |_| r.normal()).collect::<Vec<_>>()
        })
        .collect();
    Tensor::matrix(rows, dim, data).expect("rows * dim entries")
}

#[derive(Clone, Debug)]
pub struct Sampled {
    pub x: Tensor,
    /// Network evaluations per record.
    pub eval_count: u64,
}

pub fn sample_batch(
    field: &dyn VelocityField,
    ctx: &SampleContext,
    cfg: &SamplerConfig,
    rng: &RngState,
    noise_ref: Option<&dyn NoiseReference>,
) -> Result<Sampled> {
    cfg.validate()?;
    if ctx.dim() != field.dim() {
        return Err(Error::shape(format!("net of dim {} asked to sample dim {}", field.dim(), ctx.dim())));
    }
    let noise = match cfg.noise_source {
        NoiseSource::Fresh => fresh_noise(rng, ctx.len(), ctx.dim()),
        NoiseSource::UnifiedReference => noise_ref
            .ok_or_else(|| Error::contract("unified-reference sampling needs a noise reference"))?
            .predict(ctx)?,
    };
    let w = vec![(cfg.w_image, cfg.w_text); ctx.len()];
    let (x, eval_count) = integrate(field, ctx, cfg.mode, &w, noise, 1.0, 0.0, cfg.steps)?;
    Ok(Sampled { x, eval_count })
}

/// Samples one edit of `x0`.
pub fn sample(
    field: &dyn VelocityField,
    x0: &ToySample,
    meta: &MetaInfo,
    instr: &Instruction,
    cfg: &SamplerConfig,
    rng: &RngState,
    noise_ref: Option<&dyn NoiseReference>,
) -> Result<(Tensor, u64)> {
    let ctx = SampleContext::single(x0, meta, instr);
    let s = sample_batch(field, &ctx, cfg, rng, noise_ref)?;
    Ok((s.x, s.eval_count))
}

/// Per-record RMS distance between samples and targets.
pub fn endpoint_errors(x: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != target.shape() {
        return Err(Error::shape(format!("samples {:?} vs targets {:?}", x.shape(), target.shape())));
    }
    Ok((0..x.rows())
        .map(|i| {
            let (a, b) = (x.row_slice(i), target.row_slice(i));
            (a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        })
        .collect())
}

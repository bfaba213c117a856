use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{guided_velocity, integrate, NoiseReference, SampleContext, SamplerMode, VelocityField, TEACHER_STEPS};
use crate::model::{CondBatch, FloatExec, VelocityNet};
use crate::numerics::checkpoint::GuidanceRanges;
use crate::numerics::{Checkpoint, RngState};
use crate::toydata::EditPair;
use crate::trainer::Adam;
use crate::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub w_image_range: (f64, f64),
    pub w_text_range: (f64, f64),
    pub student_steps: usize,
    #[serde(default = "default_teacher_steps")]
    pub teacher_steps: usize,
    /// Guidance-distillation iterations.
    pub iterations: usize,
    /// Segment-consistency iterations.
    pub fewstep_iterations: usize,
    /// Records whose teacher trajectories are cached for segment training.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_teacher_steps() -> usize {
    TEACHER_STEPS
}
fn default_trajectories() -> usize {
    512
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    5e-4
}

impl DistillConfig {
    pub fn new(student_steps: usize, iterations: usize, fewstep_iterations: usize, seed: u64) -> Self {
        Self {
            w_image_range: (1.0, 4.0),
            w_text_range: (1.0, 6.0),
            student_steps,
            teacher_steps: TEACHER_STEPS,
            iterations,
            fewstep_iterations,
            trajectories: default_trajectories(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo >= 1.0 && lo <= hi && hi.is_finite();
        if !ok(self.w_image_range) || !ok(self.w_text_range) {
            return Err(Error::Config("guidance ranges must be nonempty intervals within [1, inf)".into()));
        }
        if self.student_steps == 0 || self.student_steps > self.teacher_steps {
            return Err(Error::Config(format!(
                "student steps {} must lie in 1..={}",
                self.student_steps, self.teacher_steps
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn ranges(&self) -> GuidanceRanges {
        GuidanceRanges {
            image: (self.w_image_range.0 as f32, self.w_image_range.1 as f32),
            text: (self.w_text_range.0 as f32, self.w_text_range.1 as f32),
        }
    }

    /// Log-uniform draw of `(w_I, w_T)` from the configured ranges.
    pub fn draw_guidance(&self, rng: &mut RngState) -> (f64, f64) {
        let lu = |(lo, hi): (f64, f64), rng: &mut RngState| (rng.uniform_in(lo.ln(), hi.ln())).exp();
        (lu(self.w_image_range, rng), lu(self.w_text_range, rng))
    }
}

/// Whether `(w_I, w_T)` lies inside trained ranges; warns on extrapolation.
pub fn check_guidance(ranges: &GuidanceRanges, w_image: f64, w_text: f64) -> bool {
    let inside = |(lo, hi): (f32, f32), w: f64| (lo as f64..=hi as f64).contains(&w);
    let ok = inside(ranges.image, w_image) && inside(ranges.text, w_text);
    if !ok {
        warn!(
            "guidance ({w_image}, {w_text}) outside the distilled ranges {:?} / {:?}; extrapolating",
            ranges.image, ranges.text
        );
    }
    ok
}

pub fn student_checkpoint(student: &VelocityNet, cfg: &DistillConfig) -> Checkpoint {
    let mut c = student.to_checkpoint();
    c.guidance = Some(cfg.ranges());
    c
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub losses: Vec<f64>,
    /// Student evaluations per sampling step vs the teacher's.
    pub student_evals_per_step: u64,
    pub teacher_evals_per_step: u64,
}

/// One Adam step regressing the student's velocity onto `target`; returns the
/// mean squared error before the update.
#[allow(clippy::too_many_arguments)]
fn regress(
    student: &mut VelocityNet,
    opt: &mut Adam,
    x_t: &Tensor,
    x0: &Tensor,
    cond: &CondBatch,
    target: Tensor,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = student.params.bind(&mut g);
    let v = student.build(&mut g, &bound, x_t, x0, &vec![false; x_t.rows()], cond, &FloatExec)?;
    let tgt = g.constant(target);
    let se = g.squared_error(v, tgt)?;
    let loss = g.mean(se);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?.for_params(&student.params.shapes());
    opt.step(&mut student.params, &grads, lr)?;
    Ok(value)
}

fn guided_cond(ctx: &SampleContext, t: &[f64], w: &[(f64, f64)]) -> Result<CondBatch> {
    let mut c = CondBatch::new(true);
    for i in 0..ctx.len() {
        c.push(&ctx.metas[i], &ctx.instrs[i], t[i], false, Some(w[i]))?;
    }
    Ok(c)
}

fn cosine(lr: f64, step: usize, total: usize) -> f64 {
    let p = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Guidance distillation: the student regresses, in one evaluation, the
/// teacher's three-evaluation guided velocity at random `(pair, t, w_I, w_T)`.
pub fn distill_cfg(
    teacher: &VelocityNet,
    student: &mut VelocityNet,
    dataset: &[EditPair],
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if !student.config.guidance {
        return Err(Error::contract("distill_cfg needs a student with guidance embeddings"));
    }
    if teacher.config.guidance {
        return Err(Error::contract("distill_cfg needs an unguided teacher"));
    }
    let data: Vec<&EditPair> = dataset.iter().filter(|p| p.dim() == teacher.dim()).collect();
    if data.is_empty() {
        return Err(Error::contract("no records match the teacher's dim"));
    }
    let rng = RngState::new(cfg.seed).fork_named("distill-cfg");
    let mut opt = Adam::new(&student.params);
    let mut report = DistillReport { student_evals_per_step: 1, teacher_evals_per_step: 3, ..Default::default() };
    let d = teacher.dim();
    for it in 0..cfg.iterations {
        let mut r = rng.fork(it as u64);
        let pairs: Vec<&EditPair> = (0..cfg.batch_size).map(|_| data[r.index(data.len())]).collect();
        let ctx = SampleContext::from_pairs(&pairs)?;
        // one shared timestep per batch keeps the teacher call to a single pass
        let t = r.uniform();
        let w: Vec<(f64, f64)> = pairs.iter().map(|_| cfg.draw_guidance(&mut r)).collect();
        let eps: Tensor = r.normal_tensor(&[pairs.len(), d], 1.0);
        let x1 = Tensor::matrix(pairs.len(), d, pairs.iter().flat_map(|p| p.target.values().to_vec()).collect())?;
        let x_t = x1.zip_map(&eps, |a, e| (1.0 - t) * a + t * e)?;
        let (target, _) = guided_velocity(teacher, &ctx, SamplerMode::TeacherCfg, &w, &x_t, t)?;
        let cond = guided_cond(&ctx, &vec![t; pairs.len()], &w)?;
        let loss = regress(student, &mut opt, &x_t, &ctx.x0, &cond, target, cosine(cfg.lr, it, cfg.iterations))?;
        report.losses.push(loss);
    }
    info!("cfg distillation: {} iterations, final loss {:.4e}", cfg.iterations, report.losses.last().unwrap_or(&f64::NAN));
    Ok(report)
}

/// Teacher states on the student's time grid, integrated from the shared
/// noise with `ceil(teacher_steps / student_steps)` Euler sub-steps per segment.
#[derive(Clone, Debug)]
pub struct TrajectoryCache {
    pub ctx: SampleContext,
    pub guidance: Vec<(f64, f64)>,
    /// `states[k]` holds every record at `t_k = 1 - k / steps`.
    pub states: Vec<Tensor>,
    pub teacher_evals: u64,
}

pub fn cache_trajectories(
    teacher: &dyn VelocityField,
    ctx: SampleContext,
    guidance: Vec<(f64, f64)>,
    start: Tensor,
    student_steps: usize,
    teacher_steps: usize,
) -> Result<TrajectoryCache> {
    let sub = teacher_steps.div_ceil(student_steps);
    let mut states = vec![start];
    let mut evals = 0;
    for k in 0..student_steps {
        let t0 = 1.0 - k as f64 / student_steps as f64;
        let t1 = 1.0 - (k + 1) as f64 / student_steps as f64;
        let x = states.last().expect("start state").clone();
        let (next, n) = integrate(teacher, &ctx, SamplerMode::TeacherCfg, &guidance, x, t0, t1, sub)?;
        evals += n;
        states.push(next);
    }
    Ok(TrajectoryCache { ctx, guidance, states, teacher_evals: evals })
}

/// Segment-consistency distillation: on each segment of the student's grid,
/// one student Euler step is regressed onto the teacher's fine-grained
/// transition over that segment, starting from the unified noise reference.
pub fn distill_fewstep(
    teacher: &VelocityNet,
    student: &mut VelocityNet,
    noise_ref: &dyn NoiseReference,
    dataset: &[EditPair],
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if !student.config.guidance {
        return Err(Error::contract("distill_fewstep needs a guidance-distilled student"));
    }
    let data: Vec<&EditPair> = dataset.iter().filter(|p| p.dim() == teacher.dim()).take(cfg.trajectories).collect();
    if data.is_empty() {
        return Err(Error::contract("no records match the teacher's dim"));
    }
    let rng = RngState::new(cfg.seed).fork_named("distill-fewstep");
    let ctx = SampleContext::from_pairs(&data)?;
    let mut wr = rng.fork_named("guidance");
    let guidance: Vec<(f64, f64)> = data.iter().map(|_| cfg.draw_guidance(&mut wr)).collect();
    let start = noise_ref.predict(&ctx)?;
    let cache = cache_trajectories(teacher, ctx, guidance, start, cfg.student_steps, cfg.teacher_steps)?;
    fewstep_from_cache(student, &cache, cfg, &rng)
}

pub fn fewstep_from_cache(
    student: &mut VelocityNet,
    cache: &TrajectoryCache,
    cfg: &DistillConfig,
    rng: &RngState,
) -> Result<DistillReport> {
    let s = cfg.student_steps;
    let h = 1.0 / s as f64;
    let n = cache.ctx.len();
    let mut opt = Adam::new(&student.params);
    let mut report = DistillReport { student_evals_per_step: 1, teacher_evals_per_step: 3, ..Default::default() };
    for it in 0..cfg.fewstep_iterations {
        let mut r = rng.fork(it as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.index(n)).collect();
        let seg: Vec<usize> = idx.iter().map(|_| r.index(s)).collect();
        let ctx = cache.ctx.subset(&idx);
        let d = ctx.dim();
        let mut x_t = Tensor::zeros(&[idx.len(), d]);
        let mut target = Tensor::zeros(&[idx.len(), d]);
        for (row, (&i, &k)) in idx.iter().zip(&seg).enumerate() {
            let (a, b) = (cache.states[k].row_slice(i), cache.states[k + 1].row_slice(i));
            x_t.row_slice_mut(row).copy_from_slice(a);
            for (j, v) in target.row_slice_mut(row).iter_mut().enumerate() {
                *v = (a[j] - b[j]) / h;
            }
        }
        let t: Vec<f64> = seg.iter().map(|&k| 1.0 - k as f64 * h).collect();
        let w: Vec<(f64, f64)> = idx.iter().map(|&i| cache.guidance[i]).collect();
        let cond = guided_cond(&ctx, &t, &w)?;
        let loss = regress(student, &mut opt, &x_t, &ctx.x0, &cond, target, cosine(cfg.lr, it, cfg.fewstep_iterations))?;
        // transition MSE = h² × velocity MSE
        report.losses.push(loss * h * h);
    }
    info!(
        "few-step distillation ({s} steps): {} iterations, final transition loss {:.4e}",
        cfg.fewstep_iterations,
        report.losses.last().unwrap_or(&f64::NAN)
    );
    Ok(report)
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::condition::CondBatch;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, CheckpointKind, NodeId, RngState};
use crate::toydata::{Tag, TaskLabel, DIMS, INSTRUCTION_LEN};
use crate::{Graph, ParamStore, Tensor};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub dim: usize,
    #[serde(default = "defaults::width")]
    pub width: usize,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::label_emb")]
    pub label_emb: usize,
    #[serde(default = "defaults::tag_emb")]
    pub tag_emb: usize,
    #[serde(default = "defaults::time_freqs")]
    pub time_freqs: usize,
    #[serde(default = "defaults::time_emb")]
    pub time_emb: usize,
    #[serde(default = "defaults::guidance_emb")]
    pub guidance_emb: usize,
    /// Whether the net takes guidance-scale embeddings (distilled student).
    #[serde(default)]
    pub guidance: bool,
}

mod defaults {
    pub fn width() -> usize {
        256
    }
    pub fn depth() -> usize {
        3
    }
    pub fn label_emb() -> usize {
        32
    }
    pub fn tag_emb() -> usize {
        32
    }
    pub fn time_freqs() -> usize {
        64
    }
    pub fn time_emb() -> usize {
        32
    }
    pub fn guidance_emb() -> usize {
        16
    }
}

impl NetConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            width: defaults::width(),
            depth: defaults::depth(),
            label_emb: defaults::label_emb(),
            tag_emb: defaults::tag_emb(),
            time_freqs: defaults::time_freqs(),
            time_emb: defaults::time_emb(),
            guidance_emb: defaults::guidance_emb(),
            guidance: false,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_guidance(mut self, on: bool) -> Self {
        self.guidance = on;
        self
    }

    /// Width of the (label, tags, instruction) segment replaced by the null
    /// embedding under text dropout.
    pub fn text_len(&self) -> usize {
        self.label_emb + self.tag_emb + INSTRUCTION_LEN
    }

    pub fn cond_len(&self) -> usize {
        self.text_len() + self.time_emb + if self.guidance { 2 * self.guidance_emb } else { 0 }
    }

    pub fn input_len(&self) -> usize {
        2 * self.dim + self.cond_len()
    }

    pub fn validate(&self) -> Result<()> {
        if !DIMS.contains(&self.dim) {
            return Err(Error::contract(format!("dim class {} is not one of {DIMS:?}", self.dim)));
        }
        if self.width == 0 || self.depth == 0 || self.time_freqs % 2 != 0 || self.guidance_emb % 2 != 0 {
            return Err(Error::contract("net widths must be positive and frequency counts even"));
        }
        Ok(())
    }

    /// Linear layers in evaluation order.
    pub fn linear_layers(&self) -> Vec<LinearLayer> {
        let mut v = vec![LinearLayer::Time];
        if self.guidance {
            v.push(LinearLayer::GuideImage);
            v.push(LinearLayer::GuideText);
        }
        v.extend((0..self.depth).map(LinearLayer::Trunk));
        v.push(LinearLayer::Out);
        if self.guidance {
            v.push(LinearLayer::GuideOutImage);
            v.push(LinearLayer::GuideOutText);
        }
        v
    }

    /// `(inputs, outputs)` of a linear layer.
    pub fn layer_shape(&self, layer: LinearLayer) -> (usize, usize) {
        match layer {
            LinearLayer::Time => (self.time_freqs, self.time_emb),
            LinearLayer::GuideImage | LinearLayer::GuideText => (self.guidance_emb, self.guidance_emb),
            LinearLayer::Trunk(0) => (self.input_len(), self.width),
            LinearLayer::Trunk(_) => (self.width, self.width),
            LinearLayer::Out | LinearLayer::GuideOutImage | LinearLayer::GuideOutText => (self.width, self.dim),
        }
    }

    /// Multiply-accumulates of one evaluation for one record.
    pub fn macs_per_eval(&self) -> u64 {
        self.linear_layers()
            .into_iter()
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                (i * o) as u64
            })
            .sum()
    }
}

/// A dense layer `y = x W + b` of the velocity net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearLayer {
    Time,
    GuideImage,
    GuideText,
    Trunk(usize),
    Out,
    /// Output heads scaled by `w_I - 1` and `w_T - 1` in guided nets.
    GuideOutImage,
    GuideOutText,
}

impl LinearLayer {
    pub fn id(&self) -> String {
        match self {
            LinearLayer::Time => "time".into(),
            LinearLayer::GuideImage => "guide_image".into(),
            LinearLayer::GuideText => "guide_text".into(),
            LinearLayer::Trunk(i) => format!("trunk.{i}"),
            LinearLayer::Out => "trunk.out".into(),
            LinearLayer::GuideOutImage => "guide_out_image".into(),
            LinearLayer::GuideOutText => "guide_out_text".into(),
        }
    }

    pub fn parse(id: &str) -> Option<Self> {
        Some(match id {
            "time" => LinearLayer::Time,
            "guide_image" => LinearLayer::GuideImage,
            "guide_text" => LinearLayer::GuideText,
            "trunk.out" => LinearLayer::Out,
            "guide_out_image" => LinearLayer::GuideOutImage,
            "guide_out_text" => LinearLayer::GuideOutText,
            other => LinearLayer::Trunk(other.strip_prefix("trunk.")?.parse().ok()?),
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.id())
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.id())
    }
}

impl fmt::Display for LinearLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Executes the dense layers of a forward pass. The float executor records
/// differentiable ops; quantized and recording executors live in `quant`.
pub trait LinearExec {
    fn linear(&self, g: &mut Graph, layer: LinearLayer, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId>;
}

/// Plain 64-bit matmul plus bias.
pub struct FloatExec;

impl LinearExec for FloatExec {
    fn linear(&self, g: &mut Graph, _layer: LinearLayer, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

/// Conditional velocity field `v(x_t, t | c, x0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub params: ParamStore,
    pub init_seed: u64,
}

/// Record written next to a checkpoint describing the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub config: NetConfig,
    pub init_seed: u64,
    pub parameters: usize,
    pub macs_per_eval: u64,
}

const EMBED_STD: f64 = 0.02;

impl VelocityNet {
    /// Fresh parameters: scaled-normal dense weights (std `1/sqrt(fan_in)`),
    /// zero biases, `N(0, 0.02)` embedding tables and a zero output layer.
    pub fn init(config: NetConfig, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let init_seed = rng.seed;
        let mut rng = rng.fork_named("velocity-net-init");
        let mut params = ParamStore::new();
        params.push("label_table", rng.normal_tensor(&[TaskLabel::ALL.len(), config.label_emb], EMBED_STD));
        params.push("tag_table", rng.normal_tensor(&[Tag::ALL.len(), config.tag_emb], EMBED_STD));
        params.push("null_text", rng.normal_tensor(&[1, config.text_len()], EMBED_STD));
        for layer in config.linear_layers() {
            let (fan_in, fan_out) = config.layer_shape(layer);
            let w = if matches!(layer, LinearLayer::Out | LinearLayer::GuideOutImage | LinearLayer::GuideOutText) {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                rng.normal_tensor(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
            };
            params.push(layer.weight_name(), w);
            params.push(layer.bias_name(), Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self { config, params, init_seed })
    }

    /// Guidance-conditioned copy of a teacher: shared tensors are copied, the
    /// first trunk layer gains zero rows for the guidance features, so the
    /// student initially reproduces the teacher's conditional velocity.
    pub fn student_from(teacher: &VelocityNet, rng: &RngState) -> Result<Self> {
        if teacher.config.guidance {
            return Err(Error::contract("student_from needs a teacher without guidance embeddings"));
        }
        let mut student = Self::init(teacher.config.clone().with_guidance(true), rng)?;
        for (pid, name) in teacher.params.names().iter().enumerate() {
            let src = teacher.params.get(pid);
            let dst = student.params.index_of(name).expect("student has every teacher tensor");
            if name == &LinearLayer::Trunk(0).weight_name() {
                let (rows, cols) = student.params.get(dst).dims2();
                let mut data = src.data().to_vec();
                data.resize(rows * cols, 0.0);
                student.params.set(dst, Tensor::matrix(rows, cols, data)?);
            } else {
                student.params.set(dst, src.clone());
            }
        }
        Ok(student)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn card(&self) -> ModelCard {
        ModelCard {
            config: self.config.clone(),
            init_seed: self.init_seed,
            parameters: self.params.total_len(),
            macs_per_eval: self.config.macs_per_eval(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let kind = if self.config.guidance { CheckpointKind::Student } else { CheckpointKind::Teacher };
        self.params.to_checkpoint(kind)
    }

    pub fn from_checkpoint(card: &ModelCard, ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Self::init(card.config.clone(), &RngState::new(0))?;
        net.params.load_from(ckpt)?;
        net.init_seed = card.init_seed;
        Ok(net)
    }

    fn pid(&self, name: &str) -> usize {
        self.params.index_of(name).unwrap_or_else(|| panic!("velocity net lacks parameter {name}"))
    }

    pub(crate) fn layer_params(&self, layer: LinearLayer) -> (usize, usize) {
        (self.pid(&layer.weight_name()), self.pid(&layer.bias_name()))
    }

    fn linear(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        layer: LinearLayer,
        x: NodeId,
        exec: &dyn LinearExec,
    ) -> Result<NodeId> {
        let (w, b) = self.layer_params(layer);
        exec.linear(g, layer, x, bound[w], bound[b])
    }

    /// Condition vectors `[B, cond_len]` for a batch.
    pub fn condition_node(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        cond: &CondBatch,
        exec: &dyn LinearExec,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let b = cond.len();
        if cond.guidance.is_some() != cfg.guidance {
            return Err(Error::contract(if cfg.guidance {
                "guidance-conditioned net needs guidance scales"
            } else {
                "guidance scales given to a net without guidance embeddings"
            }));
        }
        let label = g.embedding(bound[self.pid("label_table")], &cond.labels)?;
        let tags = g.constant(Tensor::matrix(b, 4, cond.tags.iter().flatten().copied().collect())?);
        let tags = g.matmul(tags, bound[self.pid("tag_table")])?;
        let instr = g.constant(Tensor::matrix(b, INSTRUCTION_LEN, cond.instr.iter().flatten().copied().collect())?);
        let text = g.concat(&[label, tags, instr])?;
        let text = if cond.drop_text.iter().any(|&d| d) {
            let keep = g.constant(Tensor::column(cond.drop_text.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect()));
            let drop = g.constant(Tensor::column(cond.drop_text.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect()));
            let kept = g.mul(text, keep)?;
            let null = g.matmul(drop, bound[self.pid("null_text")])?;
            g.add(kept, null)?
        } else {
            text
        };

        let time = g.constant(timestep_features(&cond.t, cfg.time_freqs)?);
        let time = self.linear(g, bound, LinearLayer::Time, time, exec)?;
        let mut parts = vec![text, time];
        if let Some(scales) = &cond.guidance {
            let wi: Vec<f64> = scales.iter().map(|s| s.0).collect();
            let wt: Vec<f64> = scales.iter().map(|s| s.1).collect();
            let fi = g.constant(guidance_features(&wi, cfg.guidance_emb)?);
            let ft = g.constant(guidance_features(&wt, cfg.guidance_emb)?);
            parts.push(self.linear(g, bound, LinearLayer::GuideImage, fi, exec)?);
            parts.push(self.linear(g, bound, LinearLayer::GuideText, ft, exec)?);
        }
        g.concat(&parts)
    }

    /// Velocity `[B, dim]` from assembled trunk inputs.
    pub fn trunk_node(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        x_t: NodeId,
        x0: NodeId,
        cond: NodeId,
        guidance: Option<&[(f64, f64)]>,
        exec: &dyn LinearExec,
    ) -> Result<NodeId> {
        let d = self.config.dim;
        if guidance.is_some() != self.config.guidance {
            return Err(Error::contract("guidance scales must be given exactly to guided nets"));
        }
        if g.value(x_t).cols() != d || g.value(x0).cols() != d {
            return Err(Error::shape(format!(
                "net of dim {d} got inputs of width {} and {}",
                g.value(x_t).cols(),
                g.value(x0).cols()
            )));
        }
        if g.value(cond).cols() != self.config.cond_len() {
            return Err(Error::shape(format!(
                "condition width {} but net expects {}",
                g.value(cond).cols(),
                self.config.cond_len()
            )));
        }
        let mut h = g.concat(&[x_t, x0, cond])?;
        for i in 0..self.config.depth {
            h = self.linear(g, bound, LinearLayer::Trunk(i), h, exec)?;
            h = g.layer_norm(h);
            h = g.gelu(h);
        }
        let v = self.linear(g, bound, LinearLayer::Out, h, exec)?;
        let Some(w) = guidance else {
            return Ok(v);
        };
        if w.len() != g.value(h).rows() {
            return Err(Error::shape("one guidance pair per record"));
        }
        // the guided velocity is affine in (w_I, w_T) with these heads as slopes
        let hi = self.linear(g, bound, LinearLayer::GuideOutImage, h, exec)?;
        let ht = self.linear(g, bound, LinearLayer::GuideOutText, h, exec)?;
        let si = g.constant(Tensor::column(w.iter().map(|p| p.0 - 1.0).collect()));
        let st = g.constant(Tensor::column(w.iter().map(|p| p.1 - 1.0).collect()));
        let hi = g.mul(hi, si)?;
        let ht = g.mul(ht, st)?;
        let v = g.add(v, hi)?;
        g.add(v, ht)
    }

    /// Velocity for a batch: `x_t`, `x0` are `[B, dim]`; rows with
    /// `drop_image` set see a zero `x0`.
    pub fn build(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        x_t: &Tensor,
        x0: &Tensor,
        drop_image: &[bool],
        cond: &CondBatch,
        exec: &dyn LinearExec,
    ) -> Result<NodeId> {
        let b = x_t.rows();
        if x0.rows() != b || cond.len() != b || drop_image.len() != b {
            return Err(Error::shape("batch members disagree on batch size"));
        }
        let mut x0_in = x0.clone();
        for (i, &drop) in drop_image.iter().enumerate() {
            if drop {
                x0_in.row_slice_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let c = self.condition_node(g, bound, cond, exec)?;
        let xt = g.constant(x_t.clone());
        let x0n = g.constant(x0_in);
        self.trunk_node(g, bound, xt, x0n, c, cond.guidance.as_deref(), exec)
    }

    /// Inference-only batch velocity.
    pub fn velocity(
        &self,
        x_t: &Tensor,
        x0: &Tensor,
        drop_image: &[bool],
        cond: &CondBatch,
        exec: &dyn LinearExec,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let v = self.build(&mut g, &bound, x_t, x0, drop_image, cond, exec)?;
        Ok(g.value(v).clone())
    }
}

/// Sinusoidal timestep features `[B, freqs]`: `sin(1000 t f_i)` then
/// `cos(1000 t f_i)` with `f_i = 10000^(-i / (freqs/2))`.
pub fn timestep_features(t: &[f64], freqs: usize) -> Result<Tensor> {
    let half = freqs / 2;
    let mut data = Vec::with_capacity(t.len() * freqs);
    for &tv in t {
        let angles: Vec<f64> =
            (0..half).map(|i| 1000.0 * tv * (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        data.extend(angles.iter().map(|a| a.sin()));
        data.extend(angles.iter().map(|a| a.cos()));
    }
    Tensor::matrix(t.len(), freqs, data)
}

/// Fourier features of `ln w` at frequencies `0.25 * 1.5^k`, sines then
/// cosines; a learned dense layer follows.
pub fn guidance_features(w: &[f64], width: usize) -> Result<Tensor> {
    let half = width / 2;
    let mut data = Vec::with_capacity(w.len() * width);
    for &wv in w {
        let u = wv.max(1e-6).ln();
        let angles: Vec<f64> = (0..half).map(|k| 0.25 * 1.5f64.powi(k as i32) * u).collect();
        data.extend(angles.iter().map(|a| a.sin()));
        data.extend(angles.iter().map(|a| a.cos()));
    }
    Tensor::matrix(w.len(), width, data)
}

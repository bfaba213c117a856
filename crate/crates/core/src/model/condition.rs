use std::ops::Range;

use super::net::{FloatExec, LinearExec, VelocityNet};
use crate::error::{Error, Result};
use crate::toydata::{Instruction, MetaInfo, INSTRUCTION_LEN};
use crate::{Graph, Tensor};

/// Raw per-record conditioning inputs for a batch, before embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CondBatch {
    pub labels: Vec<usize>,
    pub tags: Vec<[f64; 4]>,
    pub instr: Vec<[f64; INSTRUCTION_LEN]>,
    pub t: Vec<f64>,
    pub drop_text: Vec<bool>,
    /// `(w_I, w_T)` per record; only for guidance-conditioned nets.
    pub guidance: Option<Vec<(f64, f64)>>,
}

impl CondBatch {
    pub fn new(guided: bool) -> Self {
        Self { guidance: guided.then(Vec::new), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(
        &mut self,
        meta: &MetaInfo,
        instr: &Instruction,
        t: f64,
        drop_text: bool,
        guidance: Option<(f64, f64)>,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("timestep {t} outside [0, 1]")));
        }
        match (&mut self.guidance, guidance) {
            (Some(g), Some(w)) => g.push(w),
            (None, None) => {}
            (Some(_), None) => return Err(Error::contract("guided batch needs guidance scales for every record")),
            (None, Some(_)) => return Err(Error::contract("guidance scales given to an unguided batch")),
        }
        self.labels.push(meta.task_label.index());
        self.tags.push(meta.tags.multi_hot());
        self.instr.push(instr.encode());
        self.t.push(t);
        self.drop_text.push(drop_text);
        Ok(())
    }

    /// One record repeated `n` times with per-copy timesteps.
    pub fn repeat(&self, i: usize, ts: &[f64]) -> Self {
        Self {
            labels: vec![self.labels[i]; ts.len()],
            tags: vec![self.tags[i]; ts.len()],
            instr: vec![self.instr[i]; ts.len()],
            t: ts.to_vec(),
            drop_text: vec![self.drop_text[i]; ts.len()],
            guidance: self.guidance.as_ref().map(|g| vec![g[i]; ts.len()]),
        }
    }
}

/// Embedded condition of one record, plus the image-dropout flag that the
/// trunk applies to its `x0` input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    pub values: Vec<f64>,
    pub drop_image: bool,
    /// Raw `(w_I, w_T)` for guided nets, used by the output heads.
    pub guidance: Option<(f64, f64)>,
    pub layout: CondLayout,
}

/// Segment positions inside a condition vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondLayout {
    pub text: Range<usize>,
    pub time: Range<usize>,
    pub guide_image: Option<Range<usize>>,
    pub guide_text: Option<Range<usize>>,
}

impl CondLayout {
    pub fn of(net: &VelocityNet) -> Self {
        let c = &net.config;
        let text = 0..c.text_len();
        let time = text.end..text.end + c.time_emb;
        let (gi, gt) = if c.guidance {
            let gi = time.end..time.end + c.guidance_emb;
            let gt = gi.end..gi.end + c.guidance_emb;
            (Some(gi), Some(gt))
        } else {
            (None, None)
        };
        Self { text, time, guide_image: gi, guide_text: gt }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn encode_condition(
    net: &VelocityNet,
    meta: &MetaInfo,
    instr: &Instruction,
    t: f64,
    drop_image: bool,
    drop_text: bool,
    w_image: Option<f64>,
    w_text: Option<f64>,
) -> Result<ConditionVector> {
    let guidance = match (w_image, w_text) {
        (Some(i), Some(t)) => Some((i, t)),
        (None, None) => None,
        _ => return Err(Error::contract("image and text guidance scales come together")),
    };
    let mut batch = CondBatch::new(guidance.is_some());
    batch.push(meta, instr, t, drop_text, guidance)?;
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g);
    let c = net.condition_node(&mut g, &bound, &batch, &FloatExec)?;
    Ok(ConditionVector { values: g.value(c).data().to_vec(), drop_image, guidance, layout: CondLayout::of(net) })
}

/// Velocity for `x_t` (`[dim]`, `[1, dim]` or `[B, dim]`, sharing `cond`).
pub fn forward(net: &VelocityNet, x_t: &Tensor, x0: Option<&Tensor>, cond: &ConditionVector) -> Result<Tensor> {
    forward_with(net, x_t, x0, cond, &FloatExec)
}

pub fn forward_with(
    net: &VelocityNet,
    x_t: &Tensor,
    x0: Option<&Tensor>,
    cond: &ConditionVector,
    exec: &dyn LinearExec,
) -> Result<Tensor> {
    let d = net.dim();
    let as_rows = |x: &Tensor| -> Result<Tensor> {
        if x.len() % d != 0 || x.shape().last() != Some(&d) {
            return Err(Error::shape(format!("net of dim {d} got a tensor of shape {:?}", x.shape())));
        }
        x.clone().reshape(vec![x.len() / d, d])
    };
    let xt = as_rows(x_t)?;
    let b = xt.rows();
    let x0 = match x0 {
        Some(x) if !cond.drop_image => {
            let x = as_rows(x)?;
            if x.rows() != b {
                return Err(Error::shape("x0 and x_t disagree on batch size"));
            }
            x
        }
        _ => Tensor::zeros(&[b, d]),
    };
    if cond.values.len() != net.config.cond_len() {
        return Err(Error::shape(format!(
            "condition of length {} for a net expecting {}",
            cond.values.len(),
            net.config.cond_len()
        )));
    }
    let rows: Vec<f64> = (0..b).flat_map(|_| cond.values.iter().copied()).collect();
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g);
    let xn = g.constant(xt);
    let x0n = g.constant(x0);
    let cn = g.constant(Tensor::matrix(b, cond.values.len(), rows)?);
    let w = cond.guidance.map(|p| vec![p; b]);
    let v = net.trunk_node(&mut g, &bound, xn, x0n, cn, w.as_deref(), exec)?;
    g.value(v).clone().reshape(x_t.shape().to_vec())
}

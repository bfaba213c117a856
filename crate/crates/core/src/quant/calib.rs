use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{CondBatch, FloatExec, LinearExec, LinearLayer, VelocityNet};
use crate::numerics::RngState;
use crate::toydata::EditPair;
use crate::{Graph, NodeId, Tensor};

pub const CALIB_PASSES: usize = 256;

/// Float executor that records each dense layer's input.
#[derive(Default)]
pub struct RecordingExec {
    seen: RefCell<BTreeMap<LinearLayer, Vec<Tensor>>>,
}

impl RecordingExec {
    pub fn into_inputs(self) -> Result<BTreeMap<LinearLayer, Tensor>> {
        self.seen
            .into_inner()
            .into_iter()
            .map(|(l, parts)| {
                let refs: Vec<&Tensor> = parts.iter().collect();
                Ok((l, Tensor::vstack(&refs)?))
            })
            .collect()
    }
}

impl LinearExec for RecordingExec {
    fn linear(&self, g: &mut Graph, layer: LinearLayer, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.seen.borrow_mut().entry(layer).or_default().push(g.value(x).clone());
        FloatExec.linear(g, layer, x, w, b)
    }
}

/// Recorded dense-layer inputs, one row per forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSet {
    pub passes: usize,
    pub inputs: BTreeMap<LinearLayer, Tensor>,
}

impl CalibSet {
    pub fn input(&self, layer: LinearLayer) -> Result<&Tensor> {
        self.inputs.get(&layer).ok_or_else(|| Error::contract(format!("no calibration data for layer {layer}")))
    }

    /// Per-input-channel absolute maxima.
    pub fn channel_max(&self, layer: LinearLayer) -> Result<Vec<f64>> {
        Ok(super::kernel::channel_max(self.input(layer)?))
    }
}

/// Guidance scales drawn for guided nets during calibration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibGuidance {
    pub image: (f64, f64),
    pub text: (f64, f64),
}

/// Runs `passes` single-record forward passes over held-out pairs at noisy
/// interpolants `x_t = (1 - t) x1 + t ε`, `t ~ U(0, 1)`, recording layer inputs.
pub fn calibrate(
    net: &VelocityNet,
    pairs: &[EditPair],
    passes: usize,
    guidance: Option<CalibGuidance>,
    rng: &RngState,
) -> Result<CalibSet> {
    let data: Vec<&EditPair> = pairs.iter().filter(|p| p.dim() == net.dim()).collect();
    if data.is_empty() || passes == 0 {
        return Err(Error::contract(format!("calibration needs held-out pairs of dim {}", net.dim())));
    }
    if net.config.guidance && guidance.is_none() {
        return Err(Error::contract("calibrating a guided net needs guidance ranges"));
    }
    let d = net.dim();
    let mut rng = rng.fork_named("calibration");
    let mut x_t = Tensor::zeros(&[passes, d]);
    let mut x0 = Tensor::zeros(&[passes, d]);
    let mut cond = CondBatch::new(net.config.guidance);
    for i in 0..passes {
        let p = data[i % data.len()];
        let t = rng.uniform();
        for (j, v) in x_t.row_slice_mut(i).iter_mut().enumerate() {
            *v = (1.0 - t) * p.target.values()[j] + t * rng.normal();
        }
        x0.row_slice_mut(i).copy_from_slice(p.source.values());
        let w = match (net.config.guidance, guidance) {
            (true, Some(g)) => {
                let lu = |(lo, hi): (f64, f64), r: &mut RngState| r.uniform_in(lo.ln(), hi.ln()).exp();
                Some((lu(g.image, &mut rng), lu(g.text, &mut rng)))
            }
            _ => None,
        };
        cond.push(&p.meta, &p.instruction, t, false, w)?;
    }
    let rec = RecordingExec::default();
    net.velocity(&x_t, &x0, &vec![false; passes], &cond, &rec)?;
    let inputs = rec.into_inputs()?;
    for (l, x) in &inputs {
        if !x.all_finite() {
            return Err(Error::contract(format!("non-finite calibration activations at {l}")));
        }
    }
    Ok(CalibSet { passes, inputs })
}

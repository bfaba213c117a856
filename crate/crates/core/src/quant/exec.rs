use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CondBatch, LinearExec, LinearLayer, NetConfig, VelocityNet};
use crate::{Graph, NodeId, Tensor};

use super::calib::CalibSet;
use super::kernel::QuantLayer;
use super::ptq::{finetune_layer, PtqConfig};
use super::search::{build_scheme, candidate_grid, search_scheme, sensitivity, Candidate, SENSITIVITY_THRESHOLD};
use super::scheme::{check_bits, SchemeTable};

/// Cost of one multiply-accumulate relative to an f32 MAC.
pub fn mac_weight(bits: Option<u8>) -> f64 {
    match bits {
        None => 1.0,
        Some(8) => 0.25,
        Some(4) => 0.125,
        Some(b) => b as f64 / 32.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// MACs of the same evaluations run in float.
    pub float_macs: u64,
    /// MACs weighted by bit width.
    pub weighted_macs: f64,
    pub eval_counts: u64,
    /// Indicative only.
    pub wall_clock_ms: f64,
}

impl CostReport {
    /// Cost of `evals` single-record evaluations of a net whose dense layers
    /// run at the given bit widths (`None`: float).
    pub fn model(config: &NetConfig, bits: &BTreeMap<LinearLayer, Option<u8>>, evals: u64, wall_clock_ms: f64) -> Self {
        let mut weighted = 0.0;
        for l in config.linear_layers() {
            let (i, o) = config.layer_shape(l);
            weighted += (i * o) as f64 * mac_weight(bits.get(&l).copied().flatten());
        }
        Self {
            float_macs: config.macs_per_eval() * evals,
            weighted_macs: weighted * evals as f64,
            eval_counts: evals,
            wall_clock_ms,
        }
    }

    pub fn float(config: &NetConfig, evals: u64, wall_clock_ms: f64) -> Self {
        Self::model(config, &BTreeMap::new(), evals, wall_clock_ms)
    }
}

/// Dense layers run through simulated integer kernels.
#[derive(Clone, Debug)]
pub struct QuantExec {
    layers: BTreeMap<LinearLayer, (QuantLayer, Tensor)>,
}

impl QuantExec {
    /// Every dense layer of `net` must have a scheme.
    pub fn new(net: &VelocityNet, table: &SchemeTable) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for l in net.config.linear_layers() {
            let scheme = table
                .get(&l.id())
                .ok_or_else(|| Error::contract(format!("no quantization scheme for layer {l}")))?;
            let w = net.params.by_name(&l.weight_name()).expect("dense layer weight");
            let b = net.params.by_name(&l.bias_name()).expect("dense layer bias");
            layers.insert(l, (QuantLayer::new(w, scheme)?, b.clone()));
        }
        Ok(Self { layers })
    }

    pub fn bits(&self) -> BTreeMap<LinearLayer, Option<u8>> {
        self.layers.iter().map(|(l, (q, _))| (*l, Some(q.scheme.bits))).collect()
    }
}

impl LinearExec for QuantExec {
    fn linear(&self, g: &mut Graph, layer: LinearLayer, x: NodeId, _w: NodeId, _b: NodeId) -> Result<NodeId> {
        let (q, b) = self
            .layers
            .get(&layer)
            .ok_or_else(|| Error::contract(format!("no quantization scheme for layer {layer}")))?;
        let y = q.matmul(g.value(x))?;
        let y = y.add(&Tensor::vstack(&vec![b; y.rows()])?)?;
        Ok(g.constant(y))
    }
}

/// Quantized forward pass with its cost report (one evaluation per row).
pub fn qforward(
    net: &VelocityNet,
    exec: &QuantExec,
    x_t: &Tensor,
    x0: &Tensor,
    drop_image: &[bool],
    cond: &CondBatch,
) -> Result<(Tensor, CostReport)> {
    let start = Instant::now();
    let v = net.velocity(x_t, x0, drop_image, cond, exec)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((v, CostReport::model(&net.config, &exec.bits(), x_t.rows() as u64, ms)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u8,
    pub ptq: PtqConfig,
    /// Search every layer, not only the sensitive ones.
    #[serde(default)]
    pub search_all: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { bits: 8, ptq: PtqConfig::default(), search_all: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub sensitivity: f64,
    pub sensitive: bool,
    /// Index into the candidate grid; `None` for the per-tensor default.
    pub chosen: Option<usize>,
    pub candidate: Candidate,
    pub search_mse: Vec<f64>,
    pub reference_power: f64,
    pub mse_before_ptq: f64,
    pub mse_after_ptq: f64,
}

/// Per-layer scheme selection (sensitivity check, exhaustive search for
/// sensitive layers), then scale fine-tuning on the calibration set.
pub fn quantize_net(net: &VelocityNet, calib: &CalibSet, cfg: &QuantConfig) -> Result<(SchemeTable, Vec<LayerReport>)> {
    check_bits(cfg.bits)?;
    let grid = candidate_grid();
    let mut table = SchemeTable::new();
    let mut reports = Vec::new();
    for l in net.config.linear_layers() {
        let w = net.params.by_name(&l.weight_name()).expect("dense layer weight");
        let x = calib.input(l)?;
        let sens = sensitivity(w, x)?;
        let sensitive = sens > SENSITIVITY_THRESHOLD;
        let (scheme, chosen, candidate, search_mse, power) = if sensitive || cfg.search_all {
            let r = search_scheme(w, x, cfg.bits, &grid)?;
            (r.scheme, Some(r.index), grid[r.index], r.mses, r.reference_power)
        } else {
            let s = build_scheme(w, &calib.channel_max(l)?, cfg.bits, &Candidate::BASELINE)?;
            let (mse, p) = super::kernel::layer_mse(w, x, &s)?;
            (s, None, Candidate::BASELINE, vec![mse], p)
        };
        let (tuned, trace) = finetune_layer(w, x, &scheme, &cfg.ptq)?;
        let before = trace.mse[0];
        let after = *trace.mse.last().expect("trace starts with the input MSE");
        debug!("{l}: sensitivity {sens:.3e}, {} → mse {before:.3e} → {after:.3e}", candidate.granularity);
        reports.push(LayerReport {
            layer: l.id(),
            sensitivity: sens,
            sensitive,
            chosen,
            candidate,
            search_mse,
            reference_power: power,
            mse_before_ptq: before,
            mse_after_ptq: after,
        });
        table.insert(l.id(), tuned);
    }
    info!(
        "quantized {} layers to int{} ({} sensitive)",
        reports.len(),
        cfg.bits,
        reports.iter().filter(|r| r.sensitive).count()
    );
    Ok((table, reports))
}

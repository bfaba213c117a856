use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::Tensor;

use super::kernel::{layer_mse, smooth_acts, smooth_weights};
use super::scheme::{qmax, QuantScheme};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtqConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Stop after this many iterations without improvement.
    pub patience: usize,
}

impl Default for PtqConfig {
    fn default() -> Self {
        Self { iterations: 100, lr: 0.02, patience: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtqTrace {
    /// Best calibration MSE so far after each iteration; starts with the
    /// input scheme's MSE.
    pub mse: Vec<f64>,
    pub iterations_run: usize,
}

/// Dequantized values and the straight-through derivative of each with
/// respect to its scale: `q - x/s` inside the range, `q` when saturated.
fn fake_quant(x: f64, s: f64, qm: f64) -> (f64, f64) {
    let r = x / s;
    let q = r.round_ties_even().clamp(-qm, qm);
    let d = if r.abs() <= qm { q - r } else { q };
    (q * s, d)
}

/// Loss gradient with respect to the log activation scale and log weight scales.
fn log_scale_grads(xs: &Tensor, ws: &Tensor, y: &Tensor, scheme: &QuantScheme) -> Result<(f64, Vec<f64>)> {
    let qm = qmax(scheme.bits) as f64;
    let sx = scheme.act_scale as f64;
    let (n, k) = xs.dims2();
    let m = ws.cols();
    let mut a = Tensor::zeros(&[n, k]);
    let mut da = Tensor::zeros(&[n, k]);
    for i in 0..n {
        for j in 0..k {
            let (v, d) = fake_quant(xs.get2(i, j), sx, qm);
            a.row_slice_mut(i)[j] = v;
            da.row_slice_mut(i)[j] = d;
        }
    }
    let mut b = Tensor::zeros(&[k, m]);
    let mut db = Tensor::zeros(&[k, m]);
    for r in 0..k {
        for c in 0..m {
            let s = scheme.scales[scheme.granularity.unit(r, c, m)] as f64;
            let (v, d) = fake_quant(ws.get2(r, c), s, qm);
            b.row_slice_mut(r)[c] = v;
            db.row_slice_mut(r)[c] = d;
        }
    }
    let yq = a.matmul(&b)?;
    let g = yq.zip_map(y, |p, t| 2.0 * (p - t) / (n * m) as f64)?;
    let ga = g.matmul(&b.transpose())?;
    let gb = a.transpose().matmul(&g)?;
    let gsx: f64 = ga.data().iter().zip(da.data()).map(|(u, v)| u * v).sum::<f64>() * sx;
    let mut gsw = vec![0.0; scheme.scales.len()];
    for r in 0..k {
        for c in 0..m {
            gsw[scheme.granularity.unit(r, c, m)] += gb.get2(r, c) * db.get2(r, c);
        }
    }
    for (gv, s) in gsw.iter_mut().zip(&scheme.scales) {
        *gv *= *s as f64;
    }
    Ok((gsx, gsw))
}

/// Fine-tunes a layer's log-scales (weights and smoothing frozen) by Adam on
/// the straight-through reconstruction loss. The best scales seen under the
/// true calibration MSE are returned, so the result never regresses; the run
/// stops early after `patience` iterations without improvement.
pub fn finetune_layer(w: &Tensor, calib: &Tensor, scheme: &QuantScheme, cfg: &PtqConfig) -> Result<(QuantScheme, PtqTrace)> {
    let (xs, ws) = match &scheme.smoothing {
        Some(s) => (smooth_acts(calib, s), smooth_weights(w, s)),
        None => (calib.clone(), w.clone()),
    };
    let y = calib.matmul(w)?;
    let mut best = scheme.clone();
    let mut best_mse = layer_mse(w, calib, &best)?.0;
    let mut trace = PtqTrace { mse: vec![best_mse], iterations_run: 0 };
    let np = 1 + best.scales.len();
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut stale = 0;
    let mut cur = best.clone();
    for it in 0..cfg.iterations {
        if best_mse == 0.0 {
            break;
        }
        trace.iterations_run = it + 1;
        let (gx, gw) = log_scale_grads(&xs, &ws, &y, &cur)?;
        let grads = std::iter::once(gx).chain(gw).collect::<Vec<_>>();
        let t = (it + 1) as i32;
        for (p, g) in grads.iter().enumerate() {
            m1[p] = b1 * m1[p] + (1.0 - b1) * g;
            m2[p] = b2 * m2[p] + (1.0 - b2) * g * g;
            let step = cfg.lr * (m1[p] / (1.0 - b1.powi(t))) / ((m2[p] / (1.0 - b2.powi(t))).sqrt() + eps);
            let s = if p == 0 { &mut cur.act_scale } else { &mut cur.scales[p - 1] };
            let v = ((*s as f64).ln() - step).exp() as f32;
            if v > 0.0 && v.is_finite() {
                *s = v;
            }
        }
        let mse = layer_mse(w, calib, &cur)?.0;
        if mse < best_mse {
            best_mse = mse;
            best = cur.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        trace.mse.push(best_mse);
        if stale >= cfg.patience {
            break;
        }
    }
    Ok((best, trace))
}

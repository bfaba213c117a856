use crate::error::{Error, Result};
use crate::Tensor;

use super::scheme::{quantize, Granularity, QTensor, QuantScheme};

/// Per-input-channel smoothing factors.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingVector {
    /// Rounded to f32 so stored and applied factors agree bit for bit.
    pub s: Vec<f32>,
    pub alpha: f64,
}

/// `s_j = max|X_j|^α / max|W_j·|^(1-α)`; channels with a zero maximum get 1.
pub fn smoothing_factors(w: &Tensor, act_max: &[f64], alpha: f64) -> Result<SmoothingVector> {
    let (rows, _) = w.dims2();
    if act_max.len() != rows {
        return Err(Error::shape(format!("{} activation maxima for {rows} input channels", act_max.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("migration exponent {alpha} outside [0, 1]")));
    }
    if act_max.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(Error::contract("calibration maxima must be finite and nonnegative"));
    }
    let s = (0..rows)
        .map(|j| {
            let wm = w.row_slice(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let am = act_max[j];
            if wm == 0.0 || am == 0.0 {
                return 1.0;
            }
            let v = (am.powf(alpha) / wm.powf(1.0 - alpha)) as f32;
            if v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        })
        .collect();
    Ok(SmoothingVector { s, alpha })
}

/// Per-column absolute maxima of `x`.
pub fn channel_max(x: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (a, v) in m.iter_mut().zip(x.row_slice(i)) {
            *a = a.max(v.abs());
        }
    }
    m
}

/// Weight rows multiplied by `s`.
pub fn smooth_weights(w: &Tensor, s: &[f32]) -> Tensor {
    let mut out = w.clone();
    for (j, &f) in s.iter().enumerate() {
        out.row_slice_mut(j).iter_mut().for_each(|v| *v *= f as f64);
    }
    out
}

/// Activation columns divided by `s`.
pub fn smooth_acts(x: &Tensor, s: &[f32]) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, &f) in out.row_slice_mut(i).iter_mut().zip(s) {
            *v /= f as f64;
        }
    }
    out
}

/// `smooth(W, maxima, α) -> (W', s)`.
pub fn smooth(w: &Tensor, act_max: &[f64], alpha: f64) -> Result<(Tensor, SmoothingVector)> {
    let sv = smoothing_factors(w, act_max, alpha)?;
    Ok((smooth_weights(w, &sv.s), sv))
}

/// Integer GEMM of a per-tensor activation `[n, k]` and a weight `[k, m]`:
/// `i32` accumulation within each weight-scale unit, dequantized at the output.
pub fn qmatmul(x: &QTensor, w: &QTensor) -> Result<Tensor> {
    if x.granularity != Granularity::PerTensor {
        return Err(Error::contract("activations are quantized per tensor"));
    }
    if x.cols != w.rows {
        return Err(Error::shape(format!("qmatmul [{}, {}] x [{}, {}]", x.rows, x.cols, w.rows, w.cols)));
    }
    let (n, k, m) = (x.rows, x.cols, w.cols);
    // column-major weights so the inner loop is contiguous
    let mut wt = vec![0i8; k * m];
    for r in 0..k {
        for c in 0..m {
            wt[c * k + r] = w.values[r * m + c];
        }
    }
    let group = match w.granularity {
        Granularity::PerGroup(g) => g,
        _ => k.max(1),
    };
    let sx = x.scales[0] as f64;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x.values[i * k..(i + 1) * k];
        for c in 0..m {
            let wc = &wt[c * k..(c + 1) * k];
            let mut y = 0.0;
            for (gi, start) in (0..k).step_by(group).enumerate() {
                let end = (start + group).min(k);
                let acc: i32 = xi[start..end].iter().zip(&wc[start..end]).map(|(&a, &b)| a as i32 * b as i32).sum();
                let sw = w.scales[w.granularity.unit(gi * group, c, m)] as f64;
                y += acc as f64 * sw;
            }
            out[i * m + c] = y * sx;
        }
    }
    Tensor::matrix(n, m, out)
}

/// A dense layer prepared for integer execution: smoothed, quantized weights.
#[derive(Clone, Debug)]
pub struct QuantLayer {
    pub scheme: QuantScheme,
    pub qw: QTensor,
}

impl QuantLayer {
    pub fn new(w: &Tensor, scheme: &QuantScheme) -> Result<Self> {
        let (rows, cols) = w.dims2();
        scheme.validate(rows, cols)?;
        let ws = match &scheme.smoothing {
            Some(s) => smooth_weights(w, s),
            None => w.clone(),
        };
        let qw = quantize(&ws, scheme.bits, scheme.granularity, &scheme.scales)?;
        Ok(Self { scheme: scheme.clone(), qw })
    }

    pub fn quantize_input(&self, x: &Tensor) -> Result<QTensor> {
        let xs = match &self.scheme.smoothing {
            Some(s) => smooth_acts(x, s),
            None => x.clone(),
        };
        quantize(&xs, self.scheme.bits, Granularity::PerTensor, &[self.scheme.act_scale])
    }

    /// `x W` (no bias) through the integer kernel.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        qmatmul(&self.quantize_input(x)?, &self.qw)
    }
}

/// Mean squared error of the quantized layer output against `x W`, and the
/// mean squared float output (for relative errors).
pub fn layer_mse(w: &Tensor, x: &Tensor, scheme: &QuantScheme) -> Result<(f64, f64)> {
    let y = x.matmul(w)?;
    let yq = QuantLayer::new(w, scheme)?.matmul(x)?;
    let n = y.len() as f64;
    let mse = y.data().iter().zip(yq.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok((mse, y.sq_norm() / n))
}

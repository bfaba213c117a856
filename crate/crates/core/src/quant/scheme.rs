use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::Tensor;

/// Weight-scale granularity. Weights are laid out `[in, out]`; a channel is an
/// output column and a group is a run of consecutive input rows of one column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerGroup(usize),
}

pub const GROUP_SIZE: usize = 32;

impl Granularity {
    pub const ALL: [Granularity; 3] =
        [Granularity::PerTensor, Granularity::PerChannel, Granularity::PerGroup(GROUP_SIZE)];

    /// Number of scales for a `[rows, cols]` tensor.
    pub fn units(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => cols,
            Granularity::PerGroup(g) => rows.div_ceil(g) * cols,
        }
    }

    /// Scale index of element `(r, c)`.
    #[inline]
    pub fn unit(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => c,
            Granularity::PerGroup(g) => (r / g) * cols + c,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerTensor => f.write_str("per_tensor"),
            Granularity::PerChannel => f.write_str("per_channel"),
            Granularity::PerGroup(g) => write!(f, "per_group({g})"),
        }
    }
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

pub fn check_bits(bits: u8) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {bits} unsupported; use 4 or 8")))
    }
}

/// Symmetric integer tensor with one scale per granularity unit.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub granularity: Granularity,
    pub values: Vec<i8>,
    pub scales: Vec<f32>,
}

/// `clip * max|x| / qmax` per unit; empty or all-zero units get scale 1.
pub fn scales_for(x: &Tensor, bits: u8, granularity: Granularity, clip: f64) -> Vec<f32> {
    let (rows, cols) = x.dims2();
    let mut max = vec![0.0f64; granularity.units(rows, cols)];
    for r in 0..rows {
        for (c, v) in x.row_slice(r).iter().enumerate() {
            let u = granularity.unit(r, c, cols);
            max[u] = max[u].max(v.abs());
        }
    }
    max.into_iter().map(|m| scale_from_max(m, bits, clip)).collect()
}

pub fn scale_from_max(max: f64, bits: u8, clip: f64) -> f32 {
    let s = (clip * max / qmax(bits) as f64) as f32;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

#[inline]
pub fn quantize_value(x: f64, scale: f32, qmax: i32) -> i8 {
    let q = (x / scale as f64).round_ties_even();
    q.clamp(-qmax as f64, qmax as f64) as i8
}

/// Round-to-nearest-even with saturation at `±qmax`.
pub fn quantize(x: &Tensor, bits: u8, granularity: Granularity, scales: &[f32]) -> Result<QTensor> {
    check_bits(bits)?;
    let (rows, cols) = x.dims2();
    if scales.len() != granularity.units(rows, cols) {
        return Err(Error::shape(format!(
            "{} scales for a {granularity} [{rows}, {cols}] tensor",
            scales.len()
        )));
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::contract("quantization scales must be positive and finite"));
    }
    let qm = qmax(bits);
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, &v) in x.row_slice(r).iter().enumerate() {
            values.push(quantize_value(v, scales[granularity.unit(r, c, cols)], qm));
        }
    }
    Ok(QTensor { rows, cols, bits, granularity, values, scales: scales.to_vec() })
}

/// Quantizes with scales derived from the tensor's own maxima.
pub fn quantize_auto(x: &Tensor, bits: u8, granularity: Granularity, clip: f64) -> Result<QTensor> {
    quantize(x, bits, granularity, &scales_for(x, bits, granularity, clip))
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let mut data = Vec::with_capacity(q.values.len());
    for r in 0..q.rows {
        for c in 0..q.cols {
            let s = q.scales[q.granularity.unit(r, c, q.cols)] as f64;
            data.push(q.values[r * q.cols + c] as f64 * s);
        }
    }
    Tensor::matrix(q.rows, q.cols, data).expect("rows * cols values")
}

/// Quantization parameters of one dense layer.
///
/// `smoothing` holds the per-input-channel factors `s` (activations divided,
/// weight rows multiplied); `None` means unsmoothed. `alpha` records the
/// migration exponent that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub bits: u8,
    pub granularity: Granularity,
    pub clip_ratio: f64,
    pub alpha: Option<f64>,
    #[serde(with = "b64_f32")]
    pub scales: Vec<f32>,
    pub act_scale: f32,
    #[serde(with = "b64_f32_opt", default)]
    pub smoothing: Option<Vec<f32>>,
}

impl QuantScheme {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        check_bits(self.bits)?;
        if self.scales.len() != self.granularity.units(rows, cols) {
            return Err(Error::contract(format!(
                "scheme carries {} weight scales but a {} [{rows}, {cols}] layer needs {}",
                self.scales.len(),
                self.granularity,
                self.granularity.units(rows, cols)
            )));
        }
        let pos = |s: f32| s > 0.0 && s.is_finite();
        if !self.scales.iter().all(|&s| pos(s)) || !pos(self.act_scale) {
            return Err(Error::contract("scheme scales must be positive and finite"));
        }
        if let Some(s) = &self.smoothing {
            if s.len() != rows || !s.iter().all(|&v| pos(v)) {
                return Err(Error::contract("smoothing factors must be positive, one per input channel"));
            }
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return Err(Error::contract("clip ratio must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Layer id → scheme.
pub type SchemeTable = BTreeMap<String, QuantScheme>;

pub fn encode_f32(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f32(s: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

mod b64_f32 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f32(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f32>, D::Error> {
        let s = String::deserialize(d)?;
        decode_f32(&s).map_err(serde::de::Error::custom)
    }
}

mod b64_f32_opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<f32>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&encode_f32(v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f32>>, D::Error> {
        Option::<String>::deserialize(d)?.map(|s| decode_f32(&s).map_err(serde::de::Error::custom)).transpose()
    }
}

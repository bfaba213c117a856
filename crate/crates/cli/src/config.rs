//! Per-subcommand JSON configs. Unknown keys are rejected; seeds inside
//! nested library configs are replaced by ones derived from `--seed`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use seedlab::distill::{DistillConfig, NoiseRefConfig};
use seedlab::flow::{NoiseSource, TEACHER_STEPS};
use seedlab::model::NetConfig;
use seedlab::quant::{QuantConfig, CALIB_PASSES};
use seedlab::toydata::{OpKind, SourceKind};
use seedlab::trainer::StageConfig;

use crate::error::{CliError, CliResult};

/// Reads a config file, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => load_required(p),
        None => Ok(T::default()),
    }
}

pub fn load_required<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config error: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config error: {}: {e}", path.display())))
}

pub fn as_value<T: Serialize>(cfg: &T) -> serde_json::Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub n: usize,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub ops: Vec<OpKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub train: Vec<SourceSpec>,
    #[serde(default)]
    pub held_out: Vec<SourceSpec>,
    /// Add reversed copies of invertible training pairs.
    #[serde(default)]
    pub augment_reverse: bool,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let shift = |n| SourceSpec { kind: SourceKind::TraditionalOp, n, dims: vec![8], ops: vec![OpKind::ShiftContent] };
        Self { train: vec![shift(2000)], held_out: vec![shift(500)], augment_reverse: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::new(8),
            stages: vec![StageConfig::new(seedlab::trainer::Stage::Pretrain, 20_000, 0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillCliConfig {
    pub distill: DistillConfig,
    #[serde(default)]
    pub noise_ref: NoiseRefConfig,
}

impl Default for DistillCliConfig {
    fn default() -> Self {
        Self { distill: DistillConfig::new(8, 4000, 4000, 0), noise_ref: NoiseRefConfig::default() }
    }
}

fn default_passes() -> usize {
    CALIB_PASSES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default = "default_passes")]
    pub calibration_passes: usize,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self { quant: QuantConfig::default(), calibration_passes: CALIB_PASSES }
    }
}

fn one() -> f64 {
    1.0
}

/// Sampling settings shared by `sample`, `eval` and `bench`. Unset steps and
/// noise follow the checkpoint: 75 steps from fresh noise for a teacher, 8
/// steps from the noise reference for a student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "one")]
    pub w_image: f64,
    #[serde(default = "one")]
    pub w_text: f64,
    #[serde(default)]
    pub noise: Option<NoiseSource>,
    /// Use only the first `limit` records of the data file.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { steps: None, w_image: 1.0, w_text: 1.0, noise: None, limit: None }
    }
}

pub const STUDENT_STEPS: usize = 8;

impl SampleSpec {
    pub fn steps_for(&self, student: bool) -> usize {
        self.steps.unwrap_or(if student { STUDENT_STEPS } else { TEACHER_STEPS })
    }

    pub fn noise_for(&self, student: bool) -> NoiseSource {
        self.noise.unwrap_or(if student { NoiseSource::UnifiedReference } else { NoiseSource::Fresh })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub w_image: Vec<f64>,
    pub w_text: Vec<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub noise: Option<NoiseSource>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            w_image: vec![1.0, 1.5, 2.0],
            w_text: vec![1.0, 1.5, 2.0, 3.0, 4.5, 6.0],
            steps: None,
            noise: None,
            limit: Some(200),
        }
    }
}

fn teacher_steps() -> usize {
    TEACHER_STEPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default = "teacher_steps")]
    pub teacher_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { sample: SampleSpec { limit: Some(64), ..SampleSpec::default() }, teacher_steps: TEACHER_STEPS }
    }
}

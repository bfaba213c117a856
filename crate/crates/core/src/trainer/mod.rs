//! Stage-wise training: quality filtering, dimension curriculum,
//! generation-only batch mixing and adaptive timestep sampling with
//! importance weights.

mod adam;
mod stage;
mod timestep;
mod unbiased;

pub use adam::{Adam, ADAM_EPS, BETA1, BETA2};
pub use stage::{
    train_stage, validate_schedule, write_log, LogRecord, SnapshotRecord, Stage, StageConfig, StepRecord, TrainReport,
};
pub use timestep::{TimestepDistribution, TimestepDraw, DEFAULT_BINS, FLOOR_FACTOR, IMPACT_DECAY};
pub use unbiased::{unbiasedness_check, Estimate, UnbiasednessReport};

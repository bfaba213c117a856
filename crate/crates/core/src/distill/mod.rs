//! Teacher-to-student distillation: folding classifier-free guidance into one
//! evaluation, collapsing the step count, and the learned noise reference that
//! gives every sampler the same starting point.

mod noise_ref;
mod student;

pub use noise_ref::{select_noises, train_noise_ref, NoiseRefConfig, NoiseRefNet, NoiseRefReport, SUMMARY_LEN};
pub use student::{
    cache_trajectories, check_guidance, distill_cfg, distill_fewstep, fewstep_from_cache, student_checkpoint,
    DistillConfig, DistillReport, TrajectoryCache,
};

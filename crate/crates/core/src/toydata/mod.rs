//! Synthetic editing pairs and the curation pipeline: generation per source
//! kind, re-captioning, tagging, filtering, reverse augmentation, importance
//! resampling and resolution bucketing.
//!
//! Samples are block-structured vectors. The identity quarter plays the role
//! of a face, so every preservation property is an exact statement about one
//! block.

pub mod annotate;
pub mod augment;
pub mod buckets;
pub mod features;
pub mod generate;
pub mod io;
mod ops;
mod types;

pub use annotate::{compute_tags, filter_pair, recaption, FilterDecision, FilterReason, TAG_TOLERANCE};
pub use augment::{augment_reverse, importance_resample, Resampled};
pub use buckets::{plan_buckets, Batch, TailPolicy};
pub use features::{cosine, FeatureMap};
pub use generate::{gen_pairs, GenSpec};
pub use ops::reference_sample;
pub use types::*;

//! Online class-incremental semantic labeling over dense feature maps.
//!
//! The training loop consumes a stream of partially annotated mini-batches,
//! one parameter update per batch. Each update mixes the incoming batch with
//! replayed exemplars ([`memory`], [`sampler`]), fills in missing labels with
//! confident model predictions, and takes a gradient step on a two-term loss
//! over a cosine-normalized per-pixel classifier ([`model`]). See
//! [`engine::run_stream`] for the full loop.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod label;
pub mod memory;
pub mod model;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use label::{FeatureMap, LabelId, LabelSpace, Mask, Sample, TaskSchedule};

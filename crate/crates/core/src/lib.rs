//! Future object prediction with spatiotemporal detection transformers.
//!
//! Given `T` past frames and per-frame ego-motion, the model predicts the set
//! of objects (class and box) visible in a single future frame. The crate
//! bundles everything needed to train and evaluate that model on a
//! deterministic synthetic moving-objects world:
//!
//! - [`diffcore`]: tensors, reverse-mode differentiation, AdamW, schedules.
//! - [`model`]: patch backbone, transformer encoder/decoder in single-frame,
//!   joint, sequential and recurrent variants, ego-motion fusion, heads.
//! - [`assignment`]: GIoU, matching costs, Hungarian assignment, set loss.
//! - [`synthworld`]: the synthetic world and its on-disk dataset format.
//! - [`evalkit`]: AP metrics and the naive/tracking/oracle baselines.
//! - [`train`] and [`cli`]: the experiment driver.

pub mod assignment;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod synthworld;
pub mod train;

pub use error::{Error, Result};

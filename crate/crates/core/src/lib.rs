//! Unsupervised pixel-level domain adaptation for object detection.
//!
//! Labeled "sharp" source images are translated into the style of an
//! unlabeled "degraded" target domain by a cycle-consistent GAN, and a
//! compact anchor-grid detector trained on the translated images is compared
//! against source-only, augmentation, forward-only and target-supervised
//! baselines.

pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

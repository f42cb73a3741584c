//! Self-supervised contrastive pre-training and label-efficient fine-tuning
//! for 9-way MRI sequence classification on 2D slices.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`data`] builds slice datasets (synthetic phantom or ingested volumes),
//!    keeps the central slices of each plane, resamples, normalizes, and
//!    partitions records by patient.
//! 2. [`augment`] turns one slice into a positive view pair using flips,
//!    rotations, and elastic deformation only.
//! 3. [`model`] holds a ResNet-style backbone with projection, predictor,
//!    and classifier heads on a small CPU training engine.
//! 4. [`objectives`] provides NT-Xent, stop-gradient cosine, and
//!    cross-entropy losses with analytic gradients.
//! 5. [`trainer`] runs pre-training, label subsampling, fine-tuning, and
//!    sweep grids; [`report`] turns results into metrics, tables, and plots.

pub mod augment;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

//! Contrastive pre-training, label subsampling, supervised fine-tuning,
//! and sweep grids.
//!
//! Training is single-threaded and consumes data in one seeded order, so a
//! fixed seed reproduces loss logs exactly. Sweep cells are independent
//! and may run on parallel threads.

mod finetune;
mod optim;
mod pretrain;
mod sweep;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::resample_slice;
use crate::error::{Error, Result};

pub use finetune::{finetune, subsample_labels, FinetuneConfig, FinetuneOutcome, InitMode, REFERENCE_TARGET};
pub use optim::{cosine_lr, OptimizerConfig, OptimizerKind, Sgd};
pub use pretrain::{pretrain, Framework, PretrainConfig, PretrainOutcome};
pub use sweep::{run_sweep, SweepColumn, SweepConfig, DESK_BATCH_AXIS, FULL_BATCH_AXIS};

/// One row of a loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_metric: Option<f64>,
}

/// CSV with header `epoch,mean_loss,val_metric`; a missing metric is empty.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,val_metric\n");
    for e in log {
        let val = e.val_metric.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(out, "{},{},{}", e.epoch, e.mean_loss, val).unwrap();
    }
    out
}

pub fn write_loss_log(log: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}

pub(crate) fn at_resolution(pixels: ArrayView2<f32>, resolution: usize) -> Result<Array2<f32>> {
    if pixels.dim() == (resolution, resolution) {
        Ok(pixels.to_owned())
    } else {
        resample_slice(pixels, (resolution, resolution))
    }
}

/// Minibatches over `order`; a trailing batch of one is dropped when other
/// batches exist, since batch statistics need two samples.
pub(crate) fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

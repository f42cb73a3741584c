use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, OptimizerConfig, Sgd};
use super::{at_resolution, minibatches, EpochLog};
use crate::augment::{augment_pixels, AugmentConfig};
use crate::data::UnlabeledSlice;
use crate::error::{Error, Result};
use crate::model::{build_model, Checkpoint, Model, ModelSpec, TrainingStage, MIN_INPUT_SIZE};
use crate::objectives::{nt_xent_loss, simsiam_loss, ContrastiveBatch, SiamBatch, DEFAULT_TEMPERATURE};
use crate::rng::{mix64, sub_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Simclr,
    Simsiam,
}

impl std::str::FromStr for Framework {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" => Ok(Framework::Simclr),
            "simsiam" => Ok(Framework::Simsiam),
            other => Err(Error::validation("framework", format!("unknown framework {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub framework: Framework,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side length slices are resampled to before augmentation.
    pub resolution: usize,
    pub temperature: f64,
    pub optimizer: OptimizerConfig,
    /// Elastic parameters are given at 84 pixels and rescaled to `resolution`.
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            framework: Framework::Simsiam,
            epochs: 50,
            batch_size: 64,
            resolution: 84,
            temperature: DEFAULT_TEMPERATURE,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("pretrain.epochs", "must be at least 1"));
        }
        let min_batch = if self.framework == Framework::Simclr { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::validation(
                "pretrain.batch_size",
                format!("must be at least {min_batch} for {:?}; negatives need a second source", self.framework),
            ));
        }
        if self.resolution < MIN_INPUT_SIZE {
            return Err(Error::validation("pretrain.resolution", format!("must be at least {MIN_INPUT_SIZE}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation("pretrain.temperature", "must be positive"));
        }
        self.optimizer.validate("pretrain.optimizer")?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

const STREAM_ORDER: u64 = 21;
const STREAM_VIEWS: u64 = 22;

/// Contrastive pre-training on label-free slices. The backbone and heads
/// are initialized from `config.seed`.
pub fn pretrain(config: &PretrainConfig, spec: &ModelSpec, slices: &[UnlabeledSlice]) -> Result<PretrainOutcome> {
    config.validate()?;
    if slices.is_empty() {
        return Err(Error::validation("train split", "no slices to pre-train on"));
    }
    let model = build_model(spec, config.seed)?.without_classifier();
    pretrain_model(config, model, slices)
}

fn loss_and_grads(framework: Framework, temperature: f64, z: &Array2<f32>, p: Option<&Array2<f32>>) -> Result<(f64, Option<Array2<f32>>, Option<Array2<f32>>)> {
    let z = z.mapv(|v| v as f64);
    match framework {
        Framework::Simclr => {
            let lg = nt_xent_loss(&ContrastiveBatch::new(z.view(), temperature)?)?;
            Ok((lg.loss, Some(lg.grad.mapv(|v| v as f32)), None))
        }
        Framework::Simsiam => {
            let p = p.expect("predictor output").mapv(|v| v as f64);
            let (p1, p2) = (p.slice(s![0..;2, ..]), p.slice(s![1..;2, ..]));
            let (z1, z2) = (z.slice(s![0..;2, ..]), z.slice(s![1..;2, ..]));
            let out = simsiam_loss(&SiamBatch { p1, p2, z1, z2 })?;
            let mut dp = Array2::<f32>::zeros(p.dim());
            dp.slice_mut(s![0..;2, ..]).assign(&out.grad_p1.mapv(|v| v as f32));
            dp.slice_mut(s![1..;2, ..]).assign(&out.grad_p2.mapv(|v| v as f32));
            Ok((out.loss, None, Some(dp)))
        }
    }
}

pub(crate) fn pretrain_model(config: &PretrainConfig, mut model: Model, slices: &[UnlabeledSlice]) -> Result<PretrainOutcome> {
    let res = config.resolution;
    let pixels: Vec<Array2<f32>> = slices.iter().map(|s| at_resolution(s.pixels.view(), res)).collect::<Result<_>>()?;
    let augment = config.augment.scaled_for(res);
    let siam = config.framework == Framework::Simsiam;
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    let steps_per_epoch = minibatches(&order, config.batch_size).len();
    let total_steps = steps_per_epoch * config.epochs;
    let peak = config.optimizer.peak_lr(config.batch_size);
    let mut sgd = Sgd::new(&config.optimizer);
    let view_base = mix64(mix64(config.seed, STREAM_VIEWS), config.augment.seed);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut sub_rng(mix64(config.seed, STREAM_ORDER), epoch as u64));
        let epoch_seed = mix64(view_base, epoch as u64);
        let mut total = 0.0;
        let batches = minibatches(&order, config.batch_size);
        for batch in &batches {
            let (h, w) = (res, res);
            let mut x = Array4::<f32>::zeros((2 * batch.len(), 1, h, w));
            for (k, &idx) in batch.iter().enumerate() {
                let (a, b) = augment_pixels(pixels[idx].view(), &augment, mix64(epoch_seed, idx as u64));
                x.index_axis_mut(Axis(0), 2 * k).index_axis_mut(Axis(0), 0).assign(&a);
                x.index_axis_mut(Axis(0), 2 * k + 1).index_axis_mut(Axis(0), 0).assign(&b);
            }
            model.zero_grad();
            let (z, p) = model.train_project(x.view(), siam)?;
            let (loss, dz, dp) = loss_and_grads(config.framework, config.temperature, &z, p.as_ref())
                .map_err(|e| Error::Diverged { epoch, detail: format!("loss evaluation failed: {e}") })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("non-finite loss {loss} at step {step}") });
            }
            model.backward_project(dz.as_ref().map(|g| g.view()), dp.as_ref().map(|g| g.view()));
            sgd.step(&mut model, cosine_lr(peak, step, total_steps));
            step += 1;
            total += loss;
        }
        let mean_loss = total / batches.len() as f64;
        tracing::info!(epoch, mean_loss, "pretrain epoch");
        log.push(EpochLog { epoch, mean_loss, val_metric: None });
    }
    let checkpoint = Checkpoint::from_model(&model, TrainingStage::Pretrained, config.epochs, config.seed)?;
    Ok(PretrainOutcome { checkpoint, log })
}

//! Residual backbones with projection, predictor, and classifier heads.
//!
//! Inputs are `(B, 1, H, W)` batches; embeddings and head outputs are
//! `(B, D)` row-major arrays. Eval-mode passes take `&self` and share no
//! mutable state, so a frozen model can serve concurrent readers. Training
//! passes take `&mut self`, cache activations, and accumulate gradients
//! that the caller applies with an optimizer.

mod checkpoint;
pub mod layers;
mod net;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::data::N_CLASSES;
use crate::error::{Error, Result};
use crate::rng::sub_rng;
use layers::{Conv2d, FeatureMap, Param, ParamRole, Params};
use net::{Backbone, Layout, Mlp};

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedArray, TrainingStage, FRAMEWORK_VERSION};

/// Smallest supported input height and width.
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet18,
    ResnetTiny,
}

impl BackboneKind {
    pub fn embed_dim(self) -> usize {
        match self {
            BackboneKind::Resnet18 => 512,
            BackboneKind::ResnetTiny => 128,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::ResnetTiny => "resnet_tiny",
        }
    }

    fn layout(self) -> Layout {
        match self {
            BackboneKind::Resnet18 => Layout { stem_channels: 64, stem_kernel: 7, widths: [64, 128, 256, 512], depth: 2 },
            BackboneKind::ResnetTiny => Layout { stem_channels: 16, stem_kernel: 3, widths: [16, 32, 64, 128], depth: 1 },
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "resnet18" => Ok(BackboneKind::Resnet18),
            "resnet_tiny" => Ok(BackboneKind::ResnetTiny),
            other => Err(Error::validation("backbone_kind", format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone_kind: BackboneKind,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub pred_hidden_dim: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn new(kind: BackboneKind) -> Self {
        Self::with_proj_dim(kind, 128)
    }

    pub fn with_proj_dim(kind: BackboneKind, proj_dim: usize) -> Self {
        ModelSpec {
            backbone_kind: kind,
            in_channels: 1,
            embed_dim: kind.embed_dim(),
            proj_dim,
            pred_hidden_dim: proj_dim.div_ceil(4),
            n_classes: N_CLASSES,
        }
    }

    pub fn resnet18() -> Self {
        Self::new(BackboneKind::Resnet18)
    }

    pub fn resnet_tiny() -> Self {
        Self::new(BackboneKind::ResnetTiny)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::validation("in_channels", format!("must be 1, got {}", self.in_channels)));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::validation("n_classes", format!("must be {N_CLASSES}, got {}", self.n_classes)));
        }
        let expected = self.backbone_kind.embed_dim();
        if self.embed_dim != expected {
            return Err(Error::validation(
                "embed_dim",
                format!("{} produces {expected} features, got {}", self.backbone_kind, self.embed_dim),
            ));
        }
        for (field, v) in [("proj_dim", self.proj_dim), ("pred_hidden_dim", self.pred_hidden_dim)] {
            if v == 0 {
                return Err(Error::validation(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Backbone plus optional heads. [`build_model`] creates every head; a
/// fine-tuned model keeps only the classifier.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    backbone: Backbone,
    projector: Option<Mlp>,
    predictor: Option<Mlp>,
    classifier: Option<Conv2d>,
}

const STREAM_BACKBONE: u64 = 1;
const STREAM_PROJECTOR: u64 = 2;
const STREAM_PREDICTOR: u64 = 3;
const STREAM_CLASSIFIER: u64 = 4;

pub fn build_model(spec: &ModelSpec, init_seed: u64) -> Result<Model> {
    spec.validate()?;
    let backbone = Backbone::new(spec.backbone_kind.layout(), spec.in_channels, &mut sub_rng(init_seed, STREAM_BACKBONE));
    let projector = Mlp::new("projector", spec.embed_dim, spec.embed_dim, spec.proj_dim, &mut sub_rng(init_seed, STREAM_PROJECTOR));
    let predictor =
        Mlp::new("predictor", spec.proj_dim, spec.pred_hidden_dim, spec.proj_dim, &mut sub_rng(init_seed, STREAM_PREDICTOR));
    let classifier = new_classifier(spec, init_seed);
    Ok(Model { spec: spec.clone(), backbone, projector: Some(projector), predictor: Some(predictor), classifier: Some(classifier) })
}

fn new_classifier(spec: &ModelSpec, seed: u64) -> Conv2d {
    Conv2d::dense("classifier", spec.embed_dim, spec.n_classes, &mut sub_rng(seed, STREAM_CLASSIFIER))
}

fn rows_to_map(x: ArrayView2<f32>) -> FeatureMap {
    let (n, c) = x.dim();
    let data = x.t().iter().copied().collect();
    FeatureMap { c, n, h: 1, w: 1, data }
}

fn map_to_rows(x: &FeatureMap) -> Array2<f32> {
    Array2::from_shape_fn((x.n, x.c), |(i, j)| x.data[j * x.n + i])
}

fn check_finite<'a>(field: &str, mut values: impl Iterator<Item = &'a f32>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::validation(field, "contains non-finite values"))
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn has_projector(&self) -> bool {
        self.projector.is_some()
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    /// Keeps the backbone only plus a freshly initialized classifier.
    pub fn into_classifier(mut self, head_seed: u64) -> Model {
        self.projector = None;
        self.predictor = None;
        self.classifier = Some(new_classifier(&self.spec, head_seed));
        self
    }

    /// Drops the classifier (pre-trained artifacts carry none).
    pub fn without_classifier(mut self) -> Model {
        self.classifier = None;
        self
    }

    fn input_map(&self, batch: ArrayView4<f32>) -> Result<FeatureMap> {
        let (b, c, h, w) = batch.dim();
        if b == 0 {
            return Err(Error::validation("batch", "must contain at least one image"));
        }
        if c != self.spec.in_channels {
            return Err(Error::validation("batch", format!("expected {} channel(s), got {c}", self.spec.in_channels)));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::validation("batch", format!("input {h}x{w} is below the {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum")));
        }
        check_finite("batch", batch.iter())?;
        // with one channel, NCHW and CNHW share a memory order
        Ok(FeatureMap { c: 1, n: b, h, w, data: batch.iter().copied().collect() })
    }

    fn rows_in(&self, x: ArrayView2<f32>, expected: usize, field: &str) -> Result<FeatureMap> {
        let (n, d) = x.dim();
        if n == 0 || d != expected {
            return Err(Error::validation(field, format!("expected (B>=1, {expected}), got ({n}, {d})")));
        }
        check_finite(field, x.iter())?;
        Ok(rows_to_map(x))
    }

    fn head<'a, T>(head: &'a Option<T>, name: &str) -> Result<&'a T> {
        head.as_ref().ok_or_else(|| Error::validation(name, "head not present in this model"))
    }

    pub fn forward_embed(&self, batch: ArrayView4<f32>) -> Result<Array2<f32>> {
        let x = self.input_map(batch)?;
        Ok(map_to_rows(&self.backbone.infer(&x)))
    }

    pub fn forward_project(&self, embeddings: ArrayView2<f32>) -> Result<Array2<f32>> {
        let head = Self::head(&self.projector, "projector")?;
        let x = self.rows_in(embeddings, self.spec.embed_dim, "embeddings")?;
        Ok(map_to_rows(&head.infer(&x)))
    }

    pub fn forward_predict(&self, projections: ArrayView2<f32>) -> Result<Array2<f32>> {
        let head = Self::head(&self.predictor, "predictor")?;
        let x = self.rows_in(projections, head.in_features(), "projections")?;
        Ok(map_to_rows(&head.infer(&x)))
    }

    pub fn forward_classify(&self, embeddings: ArrayView2<f32>) -> Result<Array2<f32>> {
        let head = Self::head(&self.classifier, "classifier")?;
        let x = self.rows_in(embeddings, self.spec.embed_dim, "embeddings")?;
        Ok(map_to_rows(&head.infer(&x)))
    }

    /// Training-mode pass through backbone and projector, and through the
    /// predictor when `with_predictor`. Returns `(z, p)`.
    pub fn train_project(&mut self, batch: ArrayView4<f32>, with_predictor: bool) -> Result<(Array2<f32>, Option<Array2<f32>>)> {
        let x = self.input_map(batch)?;
        if self.projector.is_none() || (with_predictor && self.predictor.is_none()) {
            return Err(Error::validation("model", "contrastive heads not present"));
        }
        let e = self.backbone.forward(&x);
        let z = self.projector.as_mut().expect("checked").forward(&e);
        let p = if with_predictor { Some(map_to_rows(&self.predictor.as_mut().expect("checked").forward(&z))) } else { None };
        Ok((map_to_rows(&z), p))
    }

    /// Backward pass matching [`Model::train_project`]. `dz` is the loss
    /// gradient at the projector output (pass `None` to treat it as
    /// detached), `dp` at the predictor output.
    pub fn backward_project(&mut self, dz: Option<ArrayView2<f32>>, dp: Option<ArrayView2<f32>>) {
        let mut grad_z = dp.map(|dp| self.predictor.as_mut().expect("predictor present").backward(&rows_to_map(dp)));
        if let Some(dz) = dz {
            let dz = rows_to_map(dz);
            match &mut grad_z {
                Some(g) => g.add_assign(&dz),
                None => grad_z = Some(dz),
            }
        }
        let grad_z = grad_z.expect("backward_project needs at least one gradient");
        let grad_e = self.projector.as_mut().expect("projector present").backward(&grad_z);
        self.backbone.backward(&grad_e);
    }

    /// Training-mode pass through backbone and classifier; returns logits.
    pub fn train_classify(&mut self, batch: ArrayView4<f32>) -> Result<Array2<f32>> {
        let x = self.input_map(batch)?;
        if self.classifier.is_none() {
            return Err(Error::validation("classifier", "head not present in this model"));
        }
        let e = self.backbone.forward(&x);
        Ok(map_to_rows(&self.classifier.as_mut().expect("checked").forward(&e)))
    }

    pub fn backward_classify(&mut self, dlogits: ArrayView2<f32>) {
        let d = self.classifier.as_mut().expect("classifier present").backward(&rows_to_map(dlogits), true);
        self.backbone.backward(&d.expect("input grad requested"));
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit(f);
        if let Some(h) = &self.projector {
            h.visit(f);
        }
        if let Some(h) = &self.predictor {
            h.visit(f);
        }
        if let Some(h) = &self.classifier {
            h.visit(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        if let Some(h) = &mut self.projector {
            h.visit_mut(f);
        }
        if let Some(h) = &mut self.predictor {
            h.visit_mut(f);
        }
        if let Some(h) = &mut self.classifier {
            h.visit_mut(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Trainable scalars in the backbone (buffers excluded).
    pub fn backbone_parameter_count(&self) -> usize {
        let mut n = 0;
        self.backbone.visit(&mut |p| {
            if p.role != ParamRole::Buffer {
                n += p.numel();
            }
        });
        n
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.role != ParamRole::Buffer {
                n += p.numel();
            }
        });
        n
    }
}

/// Stacks equally sized slices into a `(B, 1, H, W)` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Array4<f32>> {
    let images: Vec<_> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return Err(Error::validation("batch", "must contain at least one image"));
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in &images {
        if img.dim() != (h, w) {
            return Err(Error::validation("batch", format!("mixed slice sizes {:?} and {:?}", (h, w), img.dim())));
        }
        data.extend(img.iter().copied());
    }
    Ok(Array4::from_shape_vec((images.len(), 1, h, w), data).expect("length matches shape"))
}

/// Rows processed per eval-mode chunk.
pub const EVAL_CHUNK: usize = 128;

impl Model {
    /// Eval-mode embeddings for any number of slices, in input order.
    pub fn embed_slices(&self, images: &[ArrayView2<f32>]) -> Result<Array2<f32>> {
        if images.is_empty() {
            return Err(Error::validation("slices", "no slices to embed"));
        }
        let mut out = Array2::zeros((images.len(), self.spec.embed_dim));
        for (i, chunk) in images.chunks(EVAL_CHUNK).enumerate() {
            let e = self.forward_embed(stack_images(chunk.iter().cloned())?.view())?;
            out.slice_mut(ndarray::s![i * EVAL_CHUNK..i * EVAL_CHUNK + chunk.len(), ..]).assign(&e);
        }
        Ok(out)
    }

    /// Eval-mode classifier logits for any number of slices.
    pub fn classify_slices(&self, images: &[ArrayView2<f32>]) -> Result<Array2<f32>> {
        let e = self.embed_slices(images)?;
        self.forward_classify(e.view())
    }
}

#[cfg(test)]
mod tests;

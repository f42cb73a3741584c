//! Metrics, result tables, latent-space projections, and plots.

mod embed;
mod plot;
mod table;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SequenceLabel, SliceRecord, Split, N_CLASSES};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, TrainingStage};

pub use embed::{
    embed_records, extract_embeddings, pca_2d, project_2d, silhouette_score, tsne_2d, EmbeddingSet, ProjectionMethod, TsneConfig,
};
pub use plot::{render_plot, PALETTE};
pub use table::{emit_table, write_table, fraction_label, CellResult, CellStatus, RunGrid, TableFormat, FRACTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    /// `None` for classes absent from the evaluated set.
    pub per_class_recall: [Option<f64>; N_CLASSES],
    pub n_samples: usize,
    /// Majority vote over each study's slices; a secondary metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_accuracy: Option<f64>,
}

impl EvalResult {
    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::validation("predictions", "length differs from labels"));
        }
        if truth.is_empty() {
            return Err(Error::validation("test split", "no samples to evaluate"));
        }
        let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= N_CLASSES || p >= N_CLASSES {
                return Err(Error::validation("labels", format!("class index out of range: {t} / {p}")));
            }
            confusion[t][p] += 1;
        }
        let trace: u64 = (0..N_CLASSES).map(|i| confusion[i][i]).sum();
        let per_class_recall = std::array::from_fn(|c| {
            let total: u64 = confusion[c].iter().sum();
            (total > 0).then(|| confusion[c][c] as f64 / total as f64)
        });
        Ok(EvalResult {
            accuracy: trace as f64 / truth.len() as f64,
            confusion,
            per_class_recall,
            n_samples: truth.len(),
            study_accuracy: None,
        })
    }
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: impl IntoIterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn predict(logits: ArrayView2<f32>) -> Vec<usize> {
    logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}

/// Slice-level evaluation of a classifier model, with study-level majority
/// vote (ties to the lowest class index) as a secondary metric.
pub fn evaluate_records(model: &Model, records: &[&SliceRecord]) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::validation("test split", "no samples to evaluate"));
    }
    let images: Vec<_> = records.iter().map(|r| r.pixels.view()).collect();
    let logits = model.classify_slices(&images)?;
    let predicted = predict(logits.view());
    let truth: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    let mut result = EvalResult::from_predictions(&truth, &predicted)?;

    let mut votes: BTreeMap<&str, (usize, [u32; N_CLASSES])> = BTreeMap::new();
    for (r, &p) in records.iter().zip(&predicted) {
        let entry = votes.entry(r.study_id.as_str()).or_insert((r.label.index(), [0; N_CLASSES]));
        entry.1[p] += 1;
    }
    let correct = votes.values().filter(|(t, v)| argmax(v.iter().map(|&c| c as f32)) == *t).count();
    result.study_accuracy = Some(correct as f64 / votes.len() as f64);
    Ok(result)
}

/// Evaluates a fine-tuned checkpoint on the test split.
pub fn evaluate(checkpoint: &Checkpoint, data: &LabeledDataset) -> Result<EvalResult> {
    if checkpoint.meta.training_stage != TrainingStage::Finetuned {
        return Err(Error::validation("checkpoint", "evaluation needs a fine-tuned checkpoint"));
    }
    let model = Model::from_checkpoint(checkpoint)?;
    evaluate_records(&model, &data.split(Split::Test))
}

/// Class names in index order, for table and plot labels.
pub fn class_names() -> [&'static str; N_CLASSES] {
    SequenceLabel::ALL.map(|l| l.name())
}

pub(crate) fn as_f64(a: ArrayView2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let truth: Vec<usize> = (0..18).map(|i| i % 9).collect();
        let r = EvalResult::from_predictions(&truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 2 } else { 0 });
            }
        }
        assert!(r.per_class_recall.iter().all(|&x| x == Some(1.0)));
    }

    #[test]
    fn half_correct() {
        let truth = [0, 1, 2, 3, 4, 5, 6, 7, 8, 0];
        let pred = [0, 1, 2, 3, 4, 0, 0, 0, 0, 1];
        let r = EvalResult::from_predictions(&truth, &pred).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.n_samples, 10);
        assert_eq!(r.per_class_recall[0], Some(0.5));
    }

    #[test]
    fn toy_three_class_confusion() {
        let truth = [0, 0, 0, 1, 1, 2, 2, 2, 2, 1, 0, 2];
        let pred = [0, 1, 0, 1, 2, 2, 2, 0, 2, 1, 0, 1];
        let r = EvalResult::from_predictions(&truth, &pred).unwrap();
        // hand count: class 0 -> {0:3, 1:1}; class 1 -> {1:2, 2:1}; class 2 -> {0:1, 1:1, 2:3}
        assert_eq!(&r.confusion[0][..3], &[3, 1, 0]);
        assert_eq!(&r.confusion[1][..3], &[0, 2, 1]);
        assert_eq!(&r.confusion[2][..3], &[1, 1, 3]);
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 12);
        assert_eq!(r.per_class_recall[5], None);
        assert!((r.accuracy - 8.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax([0.0; 9]), 0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(EvalResult::from_predictions(&[], &[]).unwrap_err().is_validation());
    }
}

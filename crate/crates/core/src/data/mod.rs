//! Slice datasets: phantom generation, volume ingestion, central-slice
//! extraction, resampling, intensity normalization, and patient-level
//! splitting.

mod container;
mod phantom;
mod slices;
mod split;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use container::{
    load_slice_file, load_volume_dir, read_manifest, read_volume, write_manifest, write_slice_file,
    write_volume,
};
pub use phantom::{generate_phantom_dataset, PhantomSpec};
pub use slices::{
    central_range, extract_central_slices, is_empty_slice, normalize_intensity, prepare_records,
    resample_slice, SlicePrep,
};
pub use split::{
    largest_remainder, split_by_patient, ManifestEntry, Split, SplitManifest, DEFAULT_RATIOS,
};

/// The nine MRI sequence classes, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SequenceLabel {
    T1,
    T2,
    #[serde(rename = "FLAIR")]
    Flair,
    #[serde(rename = "TOF")]
    Tof,
    TraceW,
    #[serde(rename = "DWI")]
    Dwi,
    #[serde(rename = "ADC")]
    Adc,
    #[serde(rename = "GRE")]
    Gre,
    Perfusion,
}

pub const N_CLASSES: usize = 9;

impl SequenceLabel {
    pub const ALL: [SequenceLabel; N_CLASSES] = [
        SequenceLabel::T1,
        SequenceLabel::T2,
        SequenceLabel::Flair,
        SequenceLabel::Tof,
        SequenceLabel::TraceW,
        SequenceLabel::Dwi,
        SequenceLabel::Adc,
        SequenceLabel::Gre,
        SequenceLabel::Perfusion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SequenceLabel::T1 => "T1",
            SequenceLabel::T2 => "T2",
            SequenceLabel::Flair => "FLAIR",
            SequenceLabel::Tof => "TOF",
            SequenceLabel::TraceW => "TraceW",
            SequenceLabel::Dwi => "DWI",
            SequenceLabel::Adc => "ADC",
            SequenceLabel::Gre => "GRE",
            SequenceLabel::Perfusion => "Perfusion",
        }
    }
}

impl fmt::Display for SequenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SequenceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation("sequence_label", format!("unknown sequence {s:?}")))
    }
}

/// Slicing plane. Volumes are indexed `[d, h, w]`: axial slices fix `d`,
/// coronal slices fix `h`, sagittal slices fix `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    /// Volume axis that indexes slices of this plane.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Plane::Sagittal => "sag",
            Plane::Coronal => "cor",
            Plane::Axial => "ax",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        })
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sag" | "sagittal" => Ok(Plane::Sagittal),
            "cor" | "coronal" => Ok(Plane::Coronal),
            "ax" | "axial" => Ok(Plane::Axial),
            other => Err(Error::validation("planes", format!("unknown plane {other:?}"))),
        }
    }
}

/// Parses a comma-separated plane list such as `sag,cor,ax`.
pub fn parse_planes(s: &str) -> Result<Vec<Plane>> {
    let mut planes = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Plane>>>()?;
    planes.sort();
    planes.dedup();
    if planes.is_empty() {
        return Err(Error::validation("planes", "at least one plane is required"));
    }
    Ok(planes)
}

/// One study's 3D acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub patient_id: String,
    pub study_id: String,
    pub label: SequenceLabel,
    pub voxels: Array3<f32>,
}

impl Volume {
    pub fn new(
        patient_id: impl Into<String>,
        study_id: impl Into<String>,
        label: SequenceLabel,
        voxels: Array3<f32>,
    ) -> Result<Self> {
        let v = Volume {
            patient_id: patient_id.into(),
            study_id: study_id.into(),
            label,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.shape().iter().any(|&n| n == 0) {
            return Err(Error::validation(
                "volume.shape",
                format!("empty volume {:?} for study {}", self.voxels.shape(), self.study_id),
            ));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "volume.voxels",
                format!("non-finite voxel in study {}", self.study_id),
            ));
        }
        Ok(())
    }
}

/// A single 2D slice with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub study_id: String,
    pub label: SequenceLabel,
    pub plane: Plane,
    /// Index along the plane's axis in the source volume.
    pub slice_index: usize,
    pub pixels: Array2<f32>,
}

impl SliceRecord {
    /// Relative path under which this slice is stored by `ingest`.
    pub fn locator(&self) -> String {
        format!(
            "slices/{}_{}_{:04}.f32",
            self.study_id,
            self.plane.short(),
            self.slice_index
        )
    }
}

/// A slice stripped of its class label. Pre-training only ever sees these.
#[derive(Debug, Clone)]
pub struct UnlabeledSlice {
    pub locator: String,
    pub pixels: Array2<f32>,
}

impl From<&SliceRecord> for UnlabeledSlice {
    fn from(r: &SliceRecord) -> Self {
        UnlabeledSlice {
            locator: r.locator(),
            pixels: r.pixels.clone(),
        }
    }
}

/// Slice records paired with the manifest that assigns them to splits.
/// `records[i]` corresponds to `manifest.entries[i]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub records: Vec<SliceRecord>,
    pub manifest: SplitManifest,
}

impl LabeledDataset {
    pub fn new(records: Vec<SliceRecord>, manifest: SplitManifest) -> Result<Self> {
        if records.len() != manifest.entries.len() {
            return Err(Error::validation(
                "manifest",
                format!(
                    "{} records but {} manifest entries",
                    records.len(),
                    manifest.entries.len()
                ),
            ));
        }
        Ok(LabeledDataset { records, manifest })
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&SliceRecord> {
        self.records
            .iter()
            .zip(&self.manifest.entries)
            .filter(|(_, e)| e.split == split)
            .map(|(r, _)| r)
            .collect()
    }

    /// Label-free copies of the training split.
    pub fn unlabeled_train(&self) -> Vec<UnlabeledSlice> {
        self.split(Split::Train).into_iter().map(UnlabeledSlice::from).collect()
    }

    /// Restricts the dataset to the entries kept in `subset` (matched by path).
    pub fn restrict_to(&self, subset: &SplitManifest) -> LabeledDataset {
        let keep: std::collections::HashSet<&str> =
            subset.entries.iter().map(|e| e.path.as_str()).collect();
        let (records, entries): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .zip(&self.manifest.entries)
            .filter(|(_, e)| keep.contains(e.path.as_str()))
            .map(|(r, e)| (r.clone(), e.clone()))
            .unzip();
        LabeledDataset {
            records,
            manifest: SplitManifest {
                entries,
                ..self.manifest.clone()
            },
        }
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| r.pixels.dim())
    }
}

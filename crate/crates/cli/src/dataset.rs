//! Prepared dataset directories: `manifest.jsonl` (plus its `.meta.json`
//! sidecar) and one raw float32 file per slice under `slices/`.

use std::path::Path;

use seqssl::data::{load_slice_file, read_manifest, write_manifest, write_slice_file, LabeledDataset, SliceRecord, SplitManifest};
use seqssl::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";

pub fn write_dataset(dir: &Path, data: &LabeledDataset) -> Result<()> {
    for (rec, entry) in data.records.iter().zip(&data.manifest.entries) {
        write_slice_file(&dir.join(&entry.path), &rec.pixels)?;
    }
    write_manifest(&dir.join(MANIFEST), &data.manifest)
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::validation("data.dataset", format!("{} has no {MANIFEST}", dir.display())));
    }
    let manifest: SplitManifest = read_manifest(&path)?;
    manifest.check_patient_disjoint()?;
    let records = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(SliceRecord {
                patient_id: e.patient_id.clone(),
                study_id: e.study_id.clone(),
                label: e.label,
                plane: e.plane,
                slice_index: e.slice_index,
                pixels: load_slice_file(&dir.join(&e.path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(records, manifest)
}

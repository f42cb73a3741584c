//! On-disk formats.
//!
//! A volume is stored as two files sharing a stem: `<stem>.json` holding
//! `{patient_id, study_id, sequence_label, shape: [D, H, W]}` and
//! `<stem>.f32` holding `D*H*W` little-endian float32 values in `[d, h, w]`
//! row-major order. Ingested slices are square raw float32 payloads.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{SequenceLabel, SplitManifest, Volume};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    patient_id: String,
    study_id: String,
    sequence_label: SequenceLabel,
    shape: [usize; 3],
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_le_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn f32_from_le(bytes: &[u8], what: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(what, format!("{} bytes is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `<dir>/<study_id>.json` and `<dir>/<study_id>.f32`.
pub fn write_volume(dir: &Path, volume: &Volume) -> Result<PathBuf> {
    let (d, h, w) = volume.voxels.dim();
    let header = VolumeHeader {
        patient_id: volume.patient_id.clone(),
        study_id: volume.study_id.clone(),
        sequence_label: volume.label,
        shape: [d, h, w],
    };
    let json_path = dir.join(format!("{}.json", volume.study_id));
    write(&json_path, serde_json::to_string_pretty(&header)?.as_bytes())?;
    write(
        &json_path.with_extension("f32"),
        &f32_le_bytes(volume.voxels.iter().copied()),
    )?;
    Ok(json_path)
}

/// Reads a volume from its JSON header path; the payload sits next to it.
pub fn read_volume(header_path: &Path) -> Result<Volume> {
    let header: VolumeHeader = serde_json::from_slice(&read(header_path)?)
        .map_err(|e| Error::format(header_path.display().to_string(), e.to_string()))?;
    let payload_path = header_path.with_extension("f32");
    let values = f32_from_le(&read(&payload_path)?, &payload_path.display().to_string())?;
    let [d, h, w] = header.shape;
    if values.len() != d * h * w {
        return Err(Error::format(
            payload_path.display().to_string(),
            format!("{} values for shape {:?}", values.len(), header.shape),
        ));
    }
    let voxels = Array3::from_shape_vec((d, h, w), values)
        .map_err(|e| Error::format("volume", e.to_string()))?;
    Volume::new(header.patient_id, header.study_id, header.sequence_label, voxels)
}

/// Loads every volume in `dir`, sorted by header file name.
pub fn load_volume_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut headers: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    headers.sort();
    headers.iter().map(|p| read_volume(p)).collect()
}

pub fn write_slice_file(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    let (h, w) = pixels.dim();
    if h != w {
        return Err(Error::validation("pixels", format!("slice files are square, got {h}x{w}")));
    }
    write(path, &f32_le_bytes(pixels.iter().copied()))
}

pub fn load_slice_file(path: &Path) -> Result<Array2<f32>> {
    let values = f32_from_le(&read(path)?, &path.display().to_string())?;
    let side = (values.len() as f64).sqrt().round() as usize;
    if side * side != values.len() || side == 0 {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} values do not form a square slice", values.len()),
        ));
    }
    Array2::from_shape_vec((side, side), values).map_err(|e| Error::format("slice", e.to_string()))
}

/// Writes the manifest as JSON Lines plus a `<path>.meta.json` sidecar
/// carrying the seed and ratios.
pub fn write_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    write(path, manifest.to_jsonl().as_bytes())?;
    let meta = serde_json::json!({ "seed": manifest.seed, "ratios": manifest.ratios });
    write(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = String::from_utf8(read(path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let (seed, ratios) = match fs::read(meta_path(path)) {
        Ok(bytes) => {
            let v: serde_json::Value = serde_json::from_slice(&bytes)?;
            let seed = v["seed"].as_u64().unwrap_or(0);
            let ratios = serde_json::from_value(v["ratios"].clone()).unwrap_or(super::DEFAULT_RATIOS);
            (seed, ratios)
        }
        Err(_) => (0, super::DEFAULT_RATIOS),
    };
    SplitManifest::from_jsonl(&text, seed, ratios)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

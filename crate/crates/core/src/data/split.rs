use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Plane, SequenceLabel, SliceRecord};
use crate::rng::rng_from;
use crate::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest line. Field order is the on-disk JSON key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub patient_id: String,
    pub study_id: String,
    pub label: SequenceLabel,
    pub plane: Plane,
    pub slice_index: usize,
    pub split: Split,
}

/// Patient-level assignment of slice records to train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn patients_in(&self, split: Split) -> BTreeSet<&str> {
        self.entries_in(split).map(|e| e.patient_id.as_str()).collect()
    }

    /// JSON Lines encoding, one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            // ManifestEntry contains only strings, enums, and integers.
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, seed: u64, ratios: [f64; 3]) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(SplitManifest { entries, seed, ratios })
    }

    /// Checks that no patient appears under two split tags.
    pub fn check_patient_disjoint(&self) -> Result<()> {
        let mut seen: std::collections::HashMap<&str, Split> = Default::default();
        for e in &self.entries {
            match seen.insert(&e.patient_id, e.split) {
                Some(prev) if prev != e.split => {
                    return Err(Error::validation(
                        "manifest",
                        format!("patient {} in both {prev} and {}", e.patient_id, e.split),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` items over `ratios`.
/// Leftover units go to the largest fractional parts; ties favour the
/// earlier position.
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas
        .iter()
        .map(|q| (q + 1e-9).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // remainders compared on a 1e-9 grid so 0.7 * 12 and 0.2 * 12 tie
    let key = |i: usize| -> i64 { ((quotas[i] - counts[i] as f64).max(0.0) * 1e9).round() as i64 };
    order.sort_by_key(|&i| (std::cmp::Reverse(key(i)), i));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles patients with a seeded PRNG and assigns each patient, with all
/// of their records, to exactly one of train/val/test.
pub fn split_by_patient(
    records: &[SliceRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    if records.is_empty() {
        return Err(Error::validation("records", "nothing to split"));
    }
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::validation("ratios", format!("{ratios:?} has a negative entry")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::validation("ratios", format!("{ratios:?} does not sum to 1")));
    }

    let mut patients: Vec<&str> = records
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if patients.len() < nonzero {
        return Err(Error::validation(
            "records",
            format!("{} patients cannot fill {nonzero} non-empty splits", patients.len()),
        ));
    }

    patients.shuffle(&mut rng_from(seed));
    let counts = largest_remainder(patients.len(), &ratios);
    let mut tag = std::collections::HashMap::new();
    let mut it = patients.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for p in it.by_ref().take(n) {
            tag.insert(p, split);
        }
    }

    let entries = records
        .iter()
        .map(|r| ManifestEntry {
            path: r.locator(),
            patient_id: r.patient_id.clone(),
            study_id: r.study_id.clone(),
            label: r.label,
            plane: r.plane,
            slice_index: r.slice_index,
            split: tag[r.patient_id.as_str()],
        })
        .collect();
    Ok(SplitManifest { entries, seed, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn records(patients: usize, per_patient: usize) -> Vec<SliceRecord> {
        (0..patients)
            .flat_map(|p| {
                (0..per_patient).map(move |i| SliceRecord {
                    patient_id: format!("P{p:03}"),
                    study_id: format!("P{p:03}-S{}", i % 3),
                    label: SequenceLabel::ALL[i % 9],
                    plane: Plane::Axial,
                    slice_index: i,
                    pixels: Array2::zeros((2, 2)),
                })
            })
            .collect()
    }

    fn patient_counts(m: &SplitManifest) -> [usize; 3] {
        Split::ALL.map(|s| m.patients_in(s).len())
    }

    #[test]
    fn ten_patients_split_7_1_2() {
        let m = split_by_patient(&records(10, 4), DEFAULT_RATIOS, 3).unwrap();
        assert_eq!(patient_counts(&m), [7, 1, 2]);
        m.check_patient_disjoint().unwrap();
    }

    #[test]
    fn single_patient_all_train() {
        let m = split_by_patient(&records(1, 5), [1.0, 0.0, 0.0], 9).unwrap();
        assert!(m.entries.iter().all(|e| e.split == Split::Train));
    }

    #[test]
    fn deterministic_bytes() {
        let r = records(23, 3);
        let a = split_by_patient(&r, DEFAULT_RATIOS, 11).unwrap().to_jsonl();
        let b = split_by_patient(&r, DEFAULT_RATIOS, 11).unwrap().to_jsonl();
        assert_eq!(a, b);
        let c = split_by_patient(&r, DEFAULT_RATIOS, 12).unwrap().to_jsonl();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_patients() {
        let err = split_by_patient(&records(2, 3), DEFAULT_RATIOS, 0).unwrap_err();
        assert!(err.is_validation());
        assert!(split_by_patient(&[], DEFAULT_RATIOS, 0).is_err());
        assert!(split_by_patient(&records(5, 1), [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn largest_remainder_cases() {
        assert_eq!(largest_remainder(10, &DEFAULT_RATIOS), vec![7, 1, 2]);
        assert_eq!(largest_remainder(12, &DEFAULT_RATIOS), vec![9, 1, 2]);
        assert_eq!(largest_remainder(3, &DEFAULT_RATIOS), vec![2, 0, 1]);
        assert_eq!(largest_remainder(0, &DEFAULT_RATIOS), vec![0, 0, 0]);
    }

    #[test]
    fn jsonl_round_trip() {
        let m = split_by_patient(&records(6, 2), DEFAULT_RATIOS, 1).unwrap();
        let text = m.to_jsonl();
        assert!(text.lines().next().unwrap().starts_with("{\"path\":\"slices/"));
        assert_eq!(SplitManifest::from_jsonl(&text, 1, DEFAULT_RATIOS).unwrap(), m);
    }

    proptest! {
        #[test]
        fn every_record_of_a_patient_shares_a_tag(n in 3usize..40, k in 1usize..6, seed: u64) {
            let m = split_by_patient(&records(n, k), DEFAULT_RATIOS, seed).unwrap();
            prop_assert!(m.check_patient_disjoint().is_ok());
            let counts: Vec<usize> = patient_counts(&m).to_vec();
            prop_assert_eq!(counts, largest_remainder(n, &DEFAULT_RATIOS));
        }
    }
}

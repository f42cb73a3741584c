use ndarray::{Array2, ArrayView2, Axis};

use super::{Plane, SliceRecord, Volume};
use crate::{Error, Result};

/// Contiguous central window of `k = max(1, round(fraction * len))` slices
/// starting at `floor((len - k) / 2)`. Returns `(start, k)`.
pub fn central_range(len: usize, fraction: f64) -> (usize, usize) {
    let k = ((fraction * len as f64).round() as usize).clamp(1, len.max(1));
    ((len - k) / 2, k)
}

/// Keeps the central `fraction` of slices along each requested plane.
/// Records come out grouped by plane in sagittal, coronal, axial order.
pub fn extract_central_slices(
    volume: &Volume,
    fraction: f64,
    planes: &[Plane],
) -> Result<Vec<SliceRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation("fraction", format!("{fraction} not in (0, 1]")));
    }
    if planes.is_empty() {
        return Err(Error::validation("planes", "no planes requested"));
    }
    volume.validate()?;

    let mut planes = planes.to_vec();
    planes.sort();
    planes.dedup();

    let mut out = Vec::new();
    for plane in planes {
        let axis = Axis(plane.axis());
        let (start, k) = central_range(volume.voxels.len_of(axis), fraction);
        for idx in start..start + k {
            out.push(SliceRecord {
                patient_id: volume.patient_id.clone(),
                study_id: volume.study_id.clone(),
                label: volume.label,
                plane,
                slice_index: idx,
                pixels: volume.voxels.index_axis(axis, idx).to_owned(),
            });
        }
    }
    Ok(out)
}

/// Sample position along one axis for corner-aligned resampling.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resampling with corner-aligned sampling: output corners sit
/// exactly on input corners. Same-size input is returned unchanged and a
/// constant image stays exactly constant.
pub fn resample_slice(pixels: ArrayView2<f32>, target: (usize, usize)) -> Result<Array2<f32>> {
    let (h, w) = pixels.dim();
    if h == 0 || w == 0 {
        return Err(Error::validation("pixels", "empty slice"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::validation("target", format!("{target:?} has a zero dimension")));
    }
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("pixels", "non-finite value in slice"));
    }
    if (h, w) == target {
        return Ok(pixels.to_owned());
    }

    let cols: Vec<(usize, usize, f64)> = (0..target.1)
        .map(|j| {
            let x = source_coord(j, w, target.1);
            let x0 = (x.floor() as usize).min(w - 1);
            (x0, (x0 + 1).min(w - 1), x - x0 as f64)
        })
        .collect();

    let mut out = Array2::<f32>::zeros(target);
    for i in 0..target.0 {
        let y = source_coord(i, h, target.0);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = y - y0 as f64;
        for (j, &(x0, x1, tx)) in cols.iter().enumerate() {
            let a = pixels[[y0, x0]] as f64;
            let b = pixels[[y0, x1]] as f64;
            let c = pixels[[y1, x0]] as f64;
            let d = pixels[[y1, x1]] as f64;
            let top = a + (b - a) * tx;
            let bottom = c + (d - c) * tx;
            out[[i, j]] = (top + (bottom - top) * ty) as f32;
        }
    }
    Ok(out)
}

/// Per-slice min-max scaling to [0, 1]. Constant slices become all zeros.
pub fn normalize_intensity(pixels: ArrayView2<f32>) -> Array2<f32> {
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if pixels.is_empty() || !(hi > lo) {
        return Array2::zeros(pixels.dim());
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    pixels.mapv(|v| ((v as f64 - lo) / span) as f32)
}

/// A slice with no intensity variation carries no sequence information.
pub fn is_empty_slice(pixels: ArrayView2<f32>) -> bool {
    match pixels.iter().next() {
        None => true,
        Some(&first) => pixels.iter().all(|&v| v == first),
    }
}

/// Parameters for turning volumes into training slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrep {
    pub fraction: f64,
    pub planes: Vec<Plane>,
    pub size: usize,
}

impl Default for SlicePrep {
    fn default() -> Self {
        SlicePrep {
            fraction: 0.3,
            planes: Plane::ALL.to_vec(),
            size: 84,
        }
    }
}

/// Extract, resample to `size x size`, normalize, and drop empty slices.
pub fn prepare_records(volumes: &[Volume], prep: &SlicePrep) -> Result<Vec<SliceRecord>> {
    let mut out = Vec::new();
    for v in volumes {
        for mut rec in extract_central_slices(v, prep.fraction, &prep.planes)? {
            let resized = resample_slice(rec.pixels.view(), (prep.size, prep.size))?;
            let normalized = normalize_intensity(resized.view());
            if is_empty_slice(normalized.view()) {
                continue;
            }
            rec.pixels = normalized;
            out.push(rec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceLabel;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn cube(d: usize, h: usize, w: usize) -> Volume {
        let vox = Array3::from_shape_fn((d, h, w), |(a, b, c)| (a * 10000 + b * 100 + c) as f32);
        Volume::new("p0", "s0", SequenceLabel::T2, vox).unwrap()
    }

    #[test]
    fn thirty_percent_of_hundred() {
        assert_eq!(central_range(100, 0.3), (35, 30));
        let v = cube(100, 4, 4);
        let recs = extract_central_slices(&v, 0.3, &[Plane::Axial]).unwrap();
        let idx: Vec<usize> = recs.iter().map(|r| r.slice_index).collect();
        assert_eq!(idx, (35..=64).collect::<Vec<_>>());
        // slice 35 along d holds values 350000 + ...
        assert_eq!(recs[0].pixels[[1, 2]], 350102.0);
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let v = cube(3, 5, 7);
        let recs = extract_central_slices(&v, 1.0, &Plane::ALL).unwrap();
        assert_eq!(recs.len(), 3 + 5 + 7);
        let sag: Vec<_> = recs.iter().filter(|r| r.plane == Plane::Sagittal).collect();
        assert_eq!(sag.len(), 7);
        assert_eq!(sag[0].pixels.dim(), (3, 5));
    }

    #[test]
    fn ninety_records_from_hundred_cube() {
        let v = Volume::new("p", "s", SequenceLabel::T1, Array3::zeros((100, 100, 100))).unwrap();
        assert_eq!(extract_central_slices(&v, 0.3, &Plane::ALL).unwrap().len(), 90);
    }

    #[test]
    fn tiny_fraction_keeps_one() {
        assert_eq!(central_range(4, 0.01), (1, 1));
        assert_eq!(central_range(1, 0.3), (0, 1));
    }

    #[test]
    fn bad_fraction_rejected() {
        let v = cube(2, 2, 2);
        assert!(extract_central_slices(&v, 0.0, &Plane::ALL).is_err());
        assert!(extract_central_slices(&v, 1.5, &Plane::ALL).is_err());
        assert!(extract_central_slices(&v, 0.5, &[]).is_err());
    }

    #[test]
    fn resample_to_84() {
        let img = Array2::from_shape_fn((256, 256), |(i, j)| (i + j) as f32);
        let out = resample_slice(img.view(), (84, 84)).unwrap();
        assert_eq!(out.dim(), (84, 84));
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[83, 83]], 510.0);
    }

    #[test]
    fn resample_identity_and_constant() {
        let img = Array2::from_shape_fn((13, 9), |(i, j)| ((i * 7 + j * 3) % 11) as f32 * 0.37);
        assert_eq!(resample_slice(img.view(), (13, 9)).unwrap(), img);
        let c = Array2::from_elem((17, 23), 5.0f32);
        for t in [(1, 1), (5, 80), (84, 84), (256, 31)] {
            assert!(resample_slice(c.view(), t).unwrap().iter().all(|&v| v == 5.0));
        }
    }

    #[test]
    fn resample_rejects_nan() {
        let mut img = Array2::<f32>::zeros((4, 4));
        img[[2, 2]] = f32::INFINITY;
        assert!(resample_slice(img.view(), (8, 8)).is_err());
        assert!(resample_slice(Array2::<f32>::zeros((0, 3)).view(), (8, 8)).is_err());
        assert!(resample_slice(Array2::<f32>::zeros((3, 3)).view(), (0, 8)).is_err());
    }

    #[test]
    fn normalize_basics() {
        let img = Array2::from_shape_fn((5, 5), |(i, j)| 10.0 + (i * 5 + j) as f32 * 100.0 / 24.0);
        let n = normalize_intensity(img.view());
        assert_eq!(n.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(n.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
        assert_eq!(normalize_intensity(n.view()), n);
        let c = Array2::from_elem((3, 3), 7.0f32);
        assert!(normalize_intensity(c.view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_slices_dropped() {
        let mut vox = Array3::<f32>::zeros((10, 10, 10));
        // only axial slice 5 carries signal
        vox[[5, 3, 3]] = 1.0;
        let v = Volume::new("p", "s", SequenceLabel::T1, vox).unwrap();
        let prep = SlicePrep { fraction: 0.3, planes: vec![Plane::Axial], size: 8 };
        let recs = prepare_records(&[v], &prep).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].slice_index, 5);
        assert_eq!(recs[0].pixels.dim(), (8, 8));
    }

    proptest! {
        #[test]
        fn resample_stays_in_range(
            h in 1usize..20, w in 1usize..20, th in 1usize..40, tw in 1usize..40,
            seed in 0u64..1000,
        ) {
            let img = Array2::from_shape_fn((h, w), |(i, j)| {
                let x = crate::rng::mix64(seed, (i * 64 + j) as u64);
                (x % 10_000) as f32 / 37.0 - 100.0
            });
            let lo = img.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let out = resample_slice(img.view(), (th, tw)).unwrap();
            prop_assert_eq!(out.dim(), (th, tw));
            for &v in out.iter() {
                prop_assert!(v as f64 >= lo - 1e-9 && v as f64 <= hi + 1e-9);
            }
        }

        #[test]
        fn slice_count_law(d in 1usize..40, h in 1usize..40, w in 1usize..40, f in 0.01f64..=1.0) {
            let v = Volume::new("p", "s", SequenceLabel::Adc, Array3::zeros((d, h, w))).unwrap();
            let recs = extract_central_slices(&v, f, &Plane::ALL).unwrap();
            let expect: usize = [d, h, w].iter().map(|&l| ((f * l as f64).round() as usize).max(1)).sum();
            prop_assert_eq!(recs.len(), expect);
        }
    }
}

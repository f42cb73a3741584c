use ndarray::Array2;
use seqssl::data::{
    extract_central_slices, generate_phantom_dataset, prepare_records, split_by_patient,
    PhantomSpec, Plane, SlicePrep, Split, DEFAULT_RATIOS, N_CLASSES,
};

/// Nearest-class-mean classifier on raw central axial slices. Class means come
/// from the first half of the patients; accuracy is measured on the second half.
fn ncm_accuracy(spec: &PhantomSpec) -> f64 {
    let vols = generate_phantom_dataset(spec).unwrap();
    let half = spec.n_studies_per_class / 2;
    let mut means: Vec<Option<(Array2<f64>, usize)>> = vec![None; N_CLASSES];
    let mut test = Vec::new();
    for v in &vols {
        let patient: usize = v.patient_id[1..].parse().unwrap();
        for r in extract_central_slices(v, 0.3, &[Plane::Axial]).unwrap() {
            let px = r.pixels.mapv(|x| x as f64);
            if patient < half {
                let slot = &mut means[r.label.index()];
                match slot {
                    Some((sum, n)) => {
                        *sum += &px;
                        *n += 1;
                    }
                    None => *slot = Some((px, 1)),
                }
            } else {
                test.push((r.label.index(), px));
            }
        }
    }
    let means: Vec<Array2<f64>> = means.into_iter().map(|m| {
        let (s, n) = m.unwrap();
        s / n as f64
    }).collect();
    let correct = test
        .iter()
        .filter(|(label, px)| {
            let best = (0..N_CLASSES)
                .min_by(|&a, &b| {
                    let da = (&means[a] - px).mapv(|v| v * v).sum();
                    let db = (&means[b] - px).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == *label
        })
        .count();

    correct as f64 / test.len() as f64
}

#[test]
fn phantom_classes_are_separable_by_class_means() {
    for seed in [3, 4, 5, 6] {
        let spec = PhantomSpec { n_studies_per_class: 20, noise_level: 0.1, seed, ..Default::default() };
        let acc = ncm_accuracy(&spec);
        eprintln!("seed {seed}: nearest-class-mean accuracy {acc:.3}");
        assert!(acc >= 0.8, "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn phantom_to_manifest_keeps_patients_disjoint() {
    let spec = PhantomSpec { n_studies_per_class: 10, volume_shape: [10, 12, 12], ..Default::default() };
    let records = prepare_records(&generate_phantom_dataset(&spec).unwrap(), &SlicePrep { size: 32, ..Default::default() }).unwrap();
    assert!(records.iter().all(|r| r.pixels.dim() == (32, 32)));
    let m = split_by_patient(&records, DEFAULT_RATIOS, 5).unwrap();
    m.check_patient_disjoint().unwrap();
    assert_eq!(m.patients_in(Split::Train).len(), 7);
    assert_eq!(m.patients_in(Split::Val).len(), 1);
    assert_eq!(m.patients_in(Split::Test).len(), 2);
}

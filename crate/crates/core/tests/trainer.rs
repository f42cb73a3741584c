use ndarray::Array2;
use seqssl::data::{
    generate_phantom_dataset, prepare_records, split_by_patient, LabeledDataset, PhantomSpec, Plane,
    SequenceLabel, SlicePrep, SliceRecord, Split, UnlabeledSlice, DEFAULT_RATIOS,
};
use seqssl::model::{Model, ModelSpec, TrainingStage};
use seqssl::report::CellStatus;
use seqssl::trainer::{
    finetune, pretrain, run_sweep, subsample_labels, FinetuneConfig, InitMode, PretrainConfig, SweepConfig,
};

fn phantom(n: usize, seed: u64) -> LabeledDataset {
    let spec = PhantomSpec { n_studies_per_class: n, volume_shape: [8, 8, 8], seed, ..Default::default() };
    let recs = prepare_records(&generate_phantom_dataset(&spec).unwrap(), &SlicePrep { size: 32, ..Default::default() }).unwrap();
    let manifest = split_by_patient(&recs, DEFAULT_RATIOS, seed).unwrap();
    LabeledDataset::new(recs, manifest).unwrap()
}

fn pre_cfg(epochs: usize) -> PretrainConfig {
    PretrainConfig { epochs, batch_size: 32, resolution: 32, seed: 1, ..Default::default() }
}

fn ft_cfg(fraction: f64, init: InitMode) -> FinetuneConfig {
    FinetuneConfig { label_fraction: fraction, init, epochs: 2, seed: 1, ..Default::default() }
}

#[test]
fn one_epoch_on_ten_slices() {
    let data = phantom(3, 0);
    let slices: Vec<UnlabeledSlice> = data.unlabeled_train().into_iter().take(10).collect();
    let cfg = PretrainConfig { batch_size: 4, ..pre_cfg(1) };
    let out = pretrain(&cfg, &ModelSpec::resnet_tiny(), &slices).unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].mean_loss.is_finite());
    assert_eq!(out.checkpoint.meta.training_stage, TrainingStage::Pretrained);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.safetensors");
    out.checkpoint.save(&path).unwrap();
    let model = Model::from_checkpoint(&seqssl::model::Checkpoint::load(&path).unwrap()).unwrap();
    assert!(model.has_projector() && model.has_predictor() && !model.has_classifier());
}

#[test]
fn simsiam_loss_descends_over_twenty_epochs() {
    let data = phantom(3, 2);
    let out = pretrain(&pre_cfg(20), &ModelSpec::resnet_tiny(), &data.unlabeled_train()).unwrap();
    let (first, last) = (out.log[0].mean_loss, out.log[19].mean_loss);
    assert!(last < first, "epoch 1 {first}, epoch 20 {last}");
}

#[test]
fn pretrain_is_deterministic() {
    let data = phantom(3, 3);
    let slices = data.unlabeled_train();
    let a = pretrain(&pre_cfg(2), &ModelSpec::resnet_tiny(), &slices).unwrap();
    let b = pretrain(&pre_cfg(2), &ModelSpec::resnet_tiny(), &slices).unwrap();
    let bits = |log: &[seqssl::trainer::EpochLog]| log.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.log), bits(&b.log));
    assert_eq!(a.checkpoint.arrays, b.checkpoint.arrays);
}

#[test]
fn simclr_needs_two_per_batch() {
    let cfg = PretrainConfig { framework: seqssl::trainer::Framework::Simclr, batch_size: 1, ..pre_cfg(1) };
    let slices = phantom(3, 0).unlabeled_train();
    assert!(pretrain(&cfg, &ModelSpec::resnet_tiny(), &slices).unwrap_err().is_validation());
}

fn fake_cohort(studies_per_class: usize) -> Vec<SliceRecord> {
    let mut out = Vec::new();
    for p in 0..studies_per_class {
        for label in SequenceLabel::ALL {
            for i in 0..2 {
                out.push(SliceRecord {
                    patient_id: format!("P{p:03}"),
                    study_id: format!("P{p:03}-{label}"),
                    label,
                    plane: Plane::Axial,
                    slice_index: i,
                    pixels: Array2::zeros((2, 2)),
                });
            }
        }
    }
    out
}

fn train_studies(m: &seqssl::data::SplitManifest) -> std::collections::BTreeSet<String> {
    m.entries_in(Split::Train).map(|e| e.study_id.clone()).collect()
}

#[test]
fn subsampling_keeps_one_study_per_class_at_five_percent() {
    let m = split_by_patient(&fake_cohort(20), [1.0, 0.0, 0.0], 0).unwrap();
    let sub = subsample_labels(&m, 0.05, 7).unwrap();
    let kept = train_studies(&sub);
    assert_eq!(kept.len(), 9);
    for label in SequenceLabel::ALL {
        assert_eq!(sub.entries_in(Split::Train).filter(|e| e.label == label).count(), 2);
    }
    assert_eq!(subsample_labels(&m, 1.0, 7).unwrap(), m);
}

#[test]
fn subsampling_is_nested_and_leaves_val_test_alone() {
    let m = split_by_patient(&fake_cohort(40), DEFAULT_RATIOS, 4).unwrap();
    let mut previous = std::collections::BTreeSet::new();
    for f in [0.005, 0.01, 0.05, 0.5, 1.0] {
        let sub = subsample_labels(&m, f, 9).unwrap();
        let kept = train_studies(&sub);
        assert!(previous.is_subset(&kept), "fraction {f}");
        for s in [Split::Val, Split::Test] {
            assert_eq!(sub.entries_in(s).count(), m.entries_in(s).count());
        }
        previous = kept;
    }
    assert_eq!(previous, train_studies(&m));
    assert!(subsample_labels(&m, 0.0, 0).unwrap_err().is_validation());
}

#[test]
fn finetune_rejects_a_mismatched_checkpoint() {
    let data = phantom(10, 0);
    let pre = pretrain(&pre_cfg(1), &ModelSpec::resnet_tiny(), &data.unlabeled_train()).unwrap();
    let other = ModelSpec::with_proj_dim(seqssl::model::BackboneKind::ResnetTiny, 64);
    let err = finetune(Some(&pre.checkpoint), &ft_cfg(1.0, InitMode::FromCheckpoint), &other, &data).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let err = finetune(None, &ft_cfg(1.0, InitMode::FromCheckpoint), &ModelSpec::resnet_tiny(), &data).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn from_scratch_ignores_the_checkpoint() {
    let data = phantom(10, 1);
    let spec = ModelSpec::resnet_tiny();
    let pre = pretrain(&pre_cfg(1), &spec, &data.unlabeled_train()).unwrap();
    let cfg = ft_cfg(0.5, InitMode::FromScratch);
    let a = finetune(Some(&pre.checkpoint), &cfg, &spec, &data).unwrap();
    let b = finetune(None, &cfg, &spec, &data).unwrap();
    assert_eq!(a.checkpoint.arrays, b.checkpoint.arrays);
    assert_eq!(a.test, b.test);

    let c = finetune(Some(&pre.checkpoint), &ft_cfg(0.5, InitMode::FromCheckpoint), &spec, &data).unwrap();
    assert_ne!(a.checkpoint.arrays, c.checkpoint.arrays);
    assert_eq!(c.checkpoint.meta.training_stage, TrainingStage::Finetuned);
    let expected = data.restrict_to(&subsample_labels(&data.manifest, 0.5, 1).unwrap()).split(Split::Train).len();
    assert_eq!(c.n_train_slices, expected);
    assert_eq!(c.test.n_samples, data.split(Split::Test).len());
    assert!(c.best_epoch >= 1 && c.best_epoch <= 2);
}

#[test]
fn sweep_resumes_and_isolates_failures() {
    let data = phantom(10, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        fractions: vec![0.05, 1.0],
        batch_sizes: vec![8, 16],
        pretrain: pre_cfg(1),
        finetune: FinetuneConfig { epochs: 1, seed: 1, ..Default::default() },
        ..Default::default()
    };
    // a directory squatting on one cell's checkpoint path makes that cell fail
    let blocker = dir.path().join("checkpoints/cell_16_100pct.safetensors");
    std::fs::create_dir_all(&blocker).unwrap();

    let grid = run_sweep(&cfg, &ModelSpec::resnet_tiny(), &data, dir.path()).unwrap();
    assert_eq!((grid.cells.len(), grid.cells[0].len()), (2, 2));
    let status = |g: &seqssl::report::RunGrid, r: usize, c: usize| g.cells[r][c].as_ref().unwrap().status;
    assert_eq!(status(&grid, 1, 1), CellStatus::Failed);
    assert!(grid.cells[1][1].as_ref().unwrap().error.is_some());
    for (r, c) in [(0, 0), (0, 1), (1, 0)] {
        assert_eq!(status(&grid, r, c), CellStatus::Done);
    }

    let done_before = std::fs::read(dir.path().join("cells/cell_8_5pct.json")).unwrap();
    let ckpt_time = |name: &str| std::fs::metadata(dir.path().join("checkpoints").join(name)).unwrap().modified().unwrap();
    let t0 = ckpt_time("cell_8_5pct.safetensors");
    std::fs::remove_dir(&blocker).unwrap();
    let again = run_sweep(&cfg, &ModelSpec::resnet_tiny(), &data, dir.path()).unwrap();
    assert_eq!(status(&again, 1, 1), CellStatus::Done);
    assert_eq!(again.cells[0][0], grid.cells[0][0]);
    assert_eq!(std::fs::read(dir.path().join("cells/cell_8_5pct.json")).unwrap(), done_before);
    assert_eq!(ckpt_time("cell_8_5pct.safetensors"), t0);
}

#[test]
fn sweep_jobs_do_not_change_results() {
    let data = phantom(10, 4);
    let cfg = SweepConfig {
        fractions: vec![1.0],
        batch_sizes: vec![8, 16],
        pretrain: pre_cfg(1),
        finetune: FinetuneConfig { epochs: 1, seed: 1, ..Default::default() },
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let serial = run_sweep(&cfg, &ModelSpec::resnet_tiny(), &data, a.path()).unwrap();
    let parallel = run_sweep(&SweepConfig { jobs: 2, ..cfg }, &ModelSpec::resnet_tiny(), &data, b.path()).unwrap();
    let acc = |g: &seqssl::report::RunGrid| g.cells[0].iter().map(|c| c.as_ref().unwrap().accuracy).collect::<Vec<_>>();
    assert_eq!(acc(&serial), acc(&parallel));
}

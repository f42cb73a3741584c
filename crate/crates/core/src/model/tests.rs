use ndarray::{Array2, Array4};
use rand::Rng;

use super::*;
use crate::rng::rng_from;

fn random_batch(b: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
    let mut rng = rng_from(seed);
    Array4::from_shape_fn((b, 1, h, w), |_| rng.random_range(0.0..1.0))
}

#[test]
fn resnet18_embeds_at_every_supported_resolution() {
    let model = build_model(&ModelSpec::resnet18(), 0).unwrap();
    for (b, s) in [(4, 84), (4, 80), (2, 256)] {
        let e = model.forward_embed(random_batch(b, s, s, 1).view()).unwrap();
        assert_eq!(e.dim(), (b, 512));
        assert!(e.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn tiny_shapes_and_heads() {
    let model = build_model(&ModelSpec::resnet_tiny(), 0).unwrap();
    let e = model.forward_embed(random_batch(3, 84, 84, 2).view()).unwrap();
    assert_eq!(e.dim(), (3, 128));
    let z = model.forward_project(e.view()).unwrap();
    assert_eq!(z.dim(), (3, 128));
    assert_eq!(model.forward_predict(z.view()).unwrap().dim(), (3, 128));
    assert_eq!(model.forward_classify(e.view()).unwrap().dim(), (3, 9));
    let one = model.forward_embed(random_batch(1, 32, 40, 2).view()).unwrap();
    assert_eq!(one.dim(), (1, 128));
}

#[test]
fn parameter_counts() {
    let r18 = build_model(&ModelSpec::resnet18(), 0).unwrap().backbone_parameter_count();
    assert_eq!(r18, 11_170_240);
    assert!((r18 as f64 / 11.2e6 - 1.0).abs() <= 0.02);
    let tiny = build_model(&ModelSpec::resnet_tiny(), 0).unwrap().backbone_parameter_count();
    assert!(tiny <= 1_000_000, "{tiny}");
}

#[test]
fn same_seed_same_init() {
    let spec = ModelSpec::resnet_tiny();
    let snap = |seed| Checkpoint::from_model(&build_model(&spec, seed).unwrap().without_classifier(), TrainingStage::Pretrained, 0, seed).unwrap().arrays;
    assert_eq!(snap(7), snap(7));
    assert_ne!(snap(7), snap(8));
}

#[test]
fn validation_errors() {
    let model = build_model(&ModelSpec::resnet_tiny(), 0).unwrap();
    assert!(model.forward_embed(random_batch(2, 31, 64, 0).view()).unwrap_err().is_validation());
    assert!(model.forward_project(Array2::zeros((2, 64)).view()).unwrap_err().is_validation());
    assert!(model.forward_classify(Array2::zeros((0, 128)).view()).unwrap_err().is_validation());
    let mut nan = random_batch(1, 32, 32, 0);
    nan[[0, 0, 3, 3]] = f32::NAN;
    assert!(model.forward_embed(nan.view()).unwrap_err().is_validation());
    assert!("resnet50".parse::<BackboneKind>().unwrap_err().is_validation());
    let mut spec = ModelSpec::resnet_tiny();
    spec.n_classes = 10;
    assert!(build_model(&spec, 0).unwrap_err().is_validation());
    assert!(serde_json::from_str::<ModelSpec>(r#"{"backbone_kind":"vgg","in_channels":1,"embed_dim":1,"proj_dim":1,"pred_hidden_dim":1,"n_classes":9}"#).is_err());
}

#[test]
fn predictor_on_zero_projection_is_finite() {
    let model = build_model(&ModelSpec::resnet_tiny(), 3).unwrap();
    let p = model.forward_predict(Array2::zeros((4, 128)).view()).unwrap();
    assert!(p.iter().all(|v| v.is_finite()));
}

#[test]
fn eval_outputs_do_not_depend_on_batch_mates() {
    let model = build_model(&ModelSpec::resnet_tiny(), 1).unwrap();
    let batch = random_batch(4, 36, 36, 9);
    let all = model.forward_embed(batch.view()).unwrap();
    for i in 0..4 {
        let single = model.forward_embed(batch.slice(ndarray::s![i..i + 1, .., .., ..])).unwrap();
        for (a, b) in all.row(i).iter().zip(single.row(0)) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
    assert_eq!(all, model.forward_embed(batch.view()).unwrap());
}

/// Loss `sum(weights * z)` through backbone and projector in train mode.
fn probe_loss(model: &mut Model, batch: &Array4<f32>, weights: &Array2<f32>) -> f64 {
    let (z, _) = model.train_project(batch.view(), false).unwrap();
    z.iter().zip(weights).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[test]
fn backward_matches_finite_differences() {
    let mut model = build_model(&ModelSpec::with_proj_dim(BackboneKind::ResnetTiny, 8), 5).unwrap();
    let batch = random_batch(4, 32, 32, 11);
    let mut rng = rng_from(12);
    let weights = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0f32..1.0));
    model.zero_grad();
    probe_loss(&mut model, &batch, &weights);
    model.backward_project(Some(weights.view()), None);

    let mut names = Vec::new();
    model.visit_params(&mut |p| {
        if p.role != ParamRole::Buffer {
            names.push((p.name.clone(), p.numel()));
        }
    });
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-3f32;
    for (k, (name, numel)) in names.iter().enumerate().step_by(3) {
        let idx = (k * 7919) % numel;
        let mut grad = 0.0;
        model.visit_params(&mut |p| {
            if &p.name == name {
                grad = p.grad[idx] as f64;
            }
        });
        let mut eval_at = |delta: f32| {
            model.visit_params_mut(&mut |p| {
                if &p.name == name {
                    p.value[idx] += delta;
                }
            });
            let l = probe_loss(&mut model, &batch, &weights);
            model.visit_params_mut(&mut |p| {
                if &p.name == name {
                    p.value[idx] -= delta;
                }
            });
            l
        };
        let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h as f64);
        analytic.push(grad);
        numeric.push(fd);
    }
    // ReLU and max-pool kinks spoil a few coordinates; the bulk must agree
    let close = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| (*a - *n).abs() <= 0.1 * a.abs().max(n.abs()) + 1e-3)
        .count();
    assert!(close * 5 >= analytic.len() * 4, "{analytic:?} vs {numeric:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model(&ModelSpec::resnet_tiny(), 4).unwrap().into_classifier(9);
    let mut ckpt = Checkpoint::from_model(&model, TrainingStage::Finetuned, 3, 4).unwrap();
    ckpt.meta.extra.insert("note".into(), serde_json::json!(1));
    let path = dir.path().join("m.safetensors");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let restored = Model::from_checkpoint(&back).unwrap();
    assert!(restored.has_classifier() && !restored.has_projector());
    let x = random_batch(2, 40, 40, 3);
    let a = model.forward_classify(model.forward_embed(x.view()).unwrap().view()).unwrap();
    let b = restored.forward_classify(restored.forward_embed(x.view()).unwrap().view()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_stage_must_match_heads() {
    let model = build_model(&ModelSpec::resnet_tiny(), 0).unwrap();
    assert!(Checkpoint::from_model(&model, TrainingStage::Pretrained, 1, 0).is_err());
    let pre = model.clone().without_classifier();
    assert!(Checkpoint::from_model(&pre, TrainingStage::Finetuned, 1, 0).is_err());
    let mut ckpt = Checkpoint::from_model(&pre, TrainingStage::Pretrained, 1, 0).unwrap();
    ckpt.arrays.values_mut().next().unwrap().data[0] = f32::INFINITY;
    assert!(ckpt.validate().is_err());
}

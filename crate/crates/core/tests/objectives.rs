mod common;

use common::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use seqssl::objectives::{cross_entropy_9way, nt_xent_loss, simsiam_loss, ContrastiveBatch, SiamBatch};

fn nt_xent(z: &Array2<f64>, tau: f64) -> f64 {
    nt_xent_loss(&ContrastiveBatch::new(z.view(), tau).unwrap()).unwrap().loss
}

fn siam(p1: &Array2<f64>, p2: &Array2<f64>, z1: &Array2<f64>, z2: &Array2<f64>) -> f64 {
    simsiam_loss(&SiamBatch { p1: p1.view(), p2: p2.view(), z1: z1.view(), z2: z2.view() }).unwrap().loss
}

#[test]
fn two_pair_axis_example_matches_enumeration() {
    let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    // each anchor: -ln(e^2 / (e^2 + e^0 + e^0)) = ln(1 + 2 e^-2)
    let frozen = 0.23954476622188453;
    assert!((nt_xent_oracle(&z, 0.5) - frozen).abs() < 1e-12);
    assert!((nt_xent(&z, 0.5) - frozen).abs() < 1e-9);
}

#[test]
fn nt_xent_matches_oracle_on_random_batches() {
    let mut r = rng(17);
    for _ in 0..50 {
        let n = r.random_range(1..=8);
        let d = r.random_range(3..=16);
        let tau = [0.1, 0.5, 1.0][r.random_range(0..3)];
        let z = random_matrix(&mut r, 2 * n, d);
        assert!((nt_xent(&z, tau) - nt_xent_oracle(&z, tau)).abs() <= 1e-9);
    }
}

#[test]
fn nt_xent_increases_with_temperature_when_positives_dominate() {
    // positives at cosine ~0.9, all negatives near zero or negative
    let z = array![
        [1.0, 0.1, 0.0, 0.0],
        [1.0, -0.3, 0.1, 0.0],
        [0.0, 0.0, 1.0, 0.2],
        [0.1, 0.0, 1.0, -0.3],
        [-1.0, 0.0, 0.0, 1.0],
        [-1.0, 0.2, 0.0, 0.8],
    ];
    let losses: Vec<f64> = [0.1, 0.5, 1.0].iter().map(|&t| nt_xent(&z, t)).collect();
    let oracle: Vec<f64> = [0.1, 0.5, 1.0].iter().map(|&t| nt_xent_oracle(&z, t)).collect();
    assert!(losses[0] < losses[1] && losses[1] < losses[2], "{losses:?}");
    assert!(oracle[0] < oracle[1] && oracle[1] < oracle[2]);
}

#[test]
fn simsiam_matches_cosine_oracle() {
    let mut r = rng(5);
    for _ in 0..20 {
        let [p1, p2, z1, z2] = [0; 4].map(|_| random_matrix(&mut r, 4, 8));
        let out = siam(&p1, &p2, &z1, &z2);
        assert!((out - simsiam_oracle(&p1, &p2, &z1, &z2)).abs() <= 1e-9);
        assert!((-1.0..=1.0).contains(&out));
    }
}

#[test]
fn cross_entropy_matches_softmax_oracle() {
    let mut r = rng(8);
    let logits = random_matrix(&mut r, 5, 9);
    let labels = [0, 8, 3, 3, 5];
    let got = cross_entropy_9way(logits.view(), &labels).unwrap().loss;
    assert!((got - cross_entropy_oracle(&logits, &labels)).abs() <= 1e-9);
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(99);
    let h = 1e-5;
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let n = r.random_range(1..=8);
        let d = r.random_range(2..=16);
        let tau = [0.1, 0.5, 1.0][r.random_range(0..3)];
        let z = random_matrix(&mut r, 2 * n, d);
        let analytic = nt_xent_loss(&ContrastiveBatch::new(z.view(), tau).unwrap()).unwrap().grad;
        let numeric = finite_difference(&z, h, |x| nt_xent_oracle(x, tau));
        worst[0] = worst[0].max(max_relative_error(&analytic, &numeric));

        let [p1, p2, z1, z2] = [0; 4].map(|_| random_matrix(&mut r, n, d));
        let out = simsiam_loss(&SiamBatch { p1: p1.view(), p2: p2.view(), z1: z1.view(), z2: z2.view() }).unwrap();
        let g1 = finite_difference(&p1, h, |x| simsiam_oracle(x, &p2, &z1, &z2));
        let g2 = finite_difference(&p2, h, |x| simsiam_oracle(&p1, x, &z1, &z2));
        worst[1] = worst[1].max(max_relative_error(&out.grad_p1, &g1)).max(max_relative_error(&out.grad_p2, &g2));

        let logits = random_matrix(&mut r, n, 9);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..9)).collect();
        let analytic = cross_entropy_9way(logits.view(), &labels).unwrap().grad;
        let numeric = finite_difference(&logits, h, |x| cross_entropy_oracle(x, &labels));
        worst[2] = worst[2].max(max_relative_error(&analytic, &numeric));
    }
    eprintln!("worst relative errors: {worst:?}");
    assert!(worst.iter().all(|&e| e <= 1e-4), "{worst:?}");
}

proptest! {
    #[test]
    fn nt_xent_symmetries(seed: u64, n in 1usize..6, d in 2usize..8, flip_mask: u8, rot in 0usize..6) {
        let mut r = rng(seed);
        let z = random_matrix(&mut r, 2 * n, d);
        let base = nt_xent(&z, 0.5);

        // swap views inside some pairs and rotate pair blocks
        let mut perm: Vec<usize> = Vec::new();
        for k in 0..n {
            let src = (k + rot) % n;
            let (a, b) = if flip_mask >> (k % 8) & 1 == 1 { (2 * src + 1, 2 * src) } else { (2 * src, 2 * src + 1) };
            perm.push(a);
            perm.push(b);
        }
        let shuffled = Array2::from_shape_fn(z.dim(), |(i, j)| z[[perm[i], j]]);
        prop_assert!((nt_xent(&shuffled, 0.5) - base).abs() <= 1e-9);

        let scales: Vec<f64> = (0..2 * n).map(|_| r.random_range(0.01..100.0)).collect();
        let scaled = Array2::from_shape_fn(z.dim(), |(i, j)| z[[i, j]] * scales[i]);
        prop_assert!((nt_xent(&scaled, 0.5) - base).abs() <= 1e-7);
    }

    #[test]
    fn simsiam_scale_invariance(seed: u64, n in 1usize..6, d in 2usize..8) {
        let mut r = rng(seed);
        let [p1, p2, z1, z2] = [0; 4].map(|_| random_matrix(&mut r, n, d));
        let base = siam(&p1, &p2, &z1, &z2);
        let mut scale = |m: &Array2<f64>| {
            let s: Vec<f64> = (0..n).map(|_| r.random_range(0.01..100.0)).collect();
            Array2::from_shape_fn(m.dim(), |(i, j)| m[[i, j]] * s[i])
        };
        let (q1, q2, w1, w2) = (scale(&p1), scale(&p2), scale(&z1), scale(&z2));
        prop_assert!((siam(&q1, &q2, &w1, &w2) - base).abs() <= 1e-7);
    }

    #[test]
    fn losses_are_bounded(seed: u64, n in 1usize..6, d in 2usize..8) {
        let mut r = rng(seed);
        let z = random_matrix(&mut r, 2 * n, d);
        let out = nt_xent_loss(&ContrastiveBatch::new(z.view(), 0.5).unwrap()).unwrap();
        prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
        prop_assert!(out.grad.iter().all(|g| g.is_finite()));
    }
}

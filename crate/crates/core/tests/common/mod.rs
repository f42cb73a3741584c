//! Independent reference computations used by the integration tests.
//! Nothing here calls into the code paths it is used to check.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// NT-Xent by enumeration of all 2N(2N-1) ordered similarity terms, with a
/// direct (unshifted) softmax.
pub fn nt_xent_oracle(z: &Array2<f64>, tau: f64) -> f64 {
    let n = z.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let positive = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        let mut numer = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            let e = (cosine(&row(z, i), &row(z, k)) / tau).exp();
            denom += e;
            if k == positive {
                numer = e;
            }
        }
        total += -(numer / denom).ln();
    }
    total / n as f64
}

/// Stop-gradient negative cosine via explicit normalized dot products.
pub fn simsiam_oracle(p1: &Array2<f64>, p2: &Array2<f64>, z1: &Array2<f64>, z2: &Array2<f64>) -> f64 {
    let n = p1.nrows();
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..n {
        a += -cosine(&row(p1, i), &row(z2, i));
        b += -cosine(&row(p2, i), &row(z1, i));
    }
    0.5 * a / n as f64 + 0.5 * b / n as f64
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy_oracle(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let exps: Vec<f64> = logits.row(i).iter().map(|v| v.exp()).collect();
        let p = exps[y] / exps.iter().sum::<f64>();
        total -= p.ln();
    }
    total / labels.len() as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest element-wise relative error `|a - b| / max(|a|, |b|, floor)`.
/// The floor keeps entries that are zero in both from dividing by zero.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    const FLOOR: f64 = 1e-6;
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

/// Mean silhouette coefficient using Euclidean distances, computed by
/// direct enumeration of all pairs.
pub fn silhouette_oracle(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let dist = |i: usize, j: usize| -> f64 {
        points.row(i).iter().zip(points.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut own = (0.0, 0usize);
        let mut others = std::collections::BTreeMap::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                own.0 += dist(i, j);
                own.1 += 1;
            } else {
                let e = others.entry(labels[j]).or_insert((0.0, 0usize));
                e.0 += dist(i, j);
                e.1 += 1;
            }
        }
        if own.1 == 0 || classes.len() < 2 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = others.values().map(|(s, c)| s / *c as f64).fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

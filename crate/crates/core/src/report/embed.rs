use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{SequenceLabel, SliceRecord};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" | "t-sne" => Ok(ProjectionMethod::Tsne),
            other => Err(Error::validation("method", format!("unknown projection {other:?}"))),
        }
    }
}

/// Backbone embeddings with labels kept for coloring only.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub labels: Vec<SequenceLabel>,
    pub coords2d: Option<Array2<f64>>,
    pub method: Option<ProjectionMethod>,
}

impl EmbeddingSet {
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

pub fn embed_records(model: &Model, records: &[&SliceRecord]) -> Result<EmbeddingSet> {
    if records.is_empty() {
        return Err(Error::validation("subset", "no slices to embed"));
    }
    let images: Vec<_> = records.iter().map(|r| r.pixels.view()).collect();
    let vectors = super::as_f64(model.embed_slices(&images)?.view());
    Ok(EmbeddingSet { vectors, labels: records.iter().map(|r| r.label).collect(), coords2d: None, method: None })
}

/// Eval-mode backbone embeddings of `records` under any checkpoint stage.
pub fn extract_embeddings(checkpoint: &Checkpoint, records: &[&SliceRecord]) -> Result<EmbeddingSet> {
    embed_records(&Model::from_checkpoint(checkpoint)?, records)
}

fn require_points(x: ArrayView2<f64>) -> Result<()> {
    if x.nrows() < 2 {
        return Err(Error::validation("embeddings", format!("need at least 2 points, got {}", x.nrows())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("embeddings", "contains non-finite values"));
    }
    Ok(())
}

/// Top-2 principal components. Each component is signed so that its
/// largest-magnitude loading is positive (earliest index on ties).
/// Returns `(coords, components, mean)` with components as rows.
pub fn pca_2d(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    require_points(x)?;
    let (m, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / m as f64).collect();
    let centered = DMatrix::from_fn(m, d, |i, j| x[[i, j]] - mean[j]);
    let cov = centered.transpose() * &centered / m as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = d.min(2);
    let mut comps = Array2::zeros((2, d));
    for (r, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for j in 1..d {
            if v[j].abs() > v[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            comps[[r, j]] = sign * v[j];
        }
    }
    let coords = Array2::from_shape_fn((m, 2), |(i, r)| (0..d).map(|j| (x[[i, j]] - mean[j]) * comps[[r, j]]).sum());
    Ok((coords, comps, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / 48, 50)`.
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 30.0, iterations: 750, learning_rate: None, seed: 0 }
    }
}

fn sq_dists(x: ArrayView2<f64>) -> Array2<f64> {
    let m = x.nrows();
    Array2::from_shape_fn((m, m), |(i, j)| x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Row-conditional affinities with per-point bandwidth found by bisection
/// on the entropy.
fn affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let m = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((m, m));
    for i in 0..m {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut row = vec![0.0; m];
        // distances relative to the nearest neighbour keep exp() in range
        let nearest = (0..m).filter(|&j| j != i).map(|j| d2[[i, j]]).fold(f64::INFINITY, f64::min);
        let d: Vec<f64> = (0..m).map(|j| d2[[i, j]] - nearest).collect();
        for _ in 0..200 {
            let mut sum = 0.0;
            for j in 0..m {
                row[j] = if i == j { 0.0 } else { (-d[j] * beta).exp() };
                sum += row[j];
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * (0..m).filter(|&j| j != i).map(|j| d[j] * row[j]).sum::<f64>() / sum;
            row.iter_mut().for_each(|v| *v /= sum);
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        for j in 0..m {
            p[[i, j]] = row[j];
        }
    }
    p
}

/// Exact-gradient t-SNE, deterministic for a fixed seed.
pub fn tsne_2d(x: ArrayView2<f64>, config: &TsneConfig) -> Result<Array2<f64>> {
    require_points(x)?;
    let m = x.nrows();
    let lr = config.learning_rate.unwrap_or((m as f64 / 48.0).max(50.0));
    if !(config.perplexity > 0.0) || !(lr > 0.0) {
        return Err(Error::validation("tsne", "perplexity and learning_rate must be positive"));
    }
    let perplexity = config.perplexity.min((m as f64 - 1.0) / 3.0).max(1.0);
    let cond = affinities(&sq_dists(x), perplexity);
    let p = (&cond + &cond.t()) / (2.0 * m as f64);
    let p = p.mapv(|v| v.max(1e-12));

    let mut rng = rng_from(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid");
    let mut y: Array2<f64> = Array2::from_shape_fn((m, 2), |_| normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((m, 2));
    let mut gains = Array2::<f64>::ones((m, 2));
    let exaggeration_iters = config.iterations.min(250);
    for it in 0..config.iterations {
        let exaggeration = if it < exaggeration_iters { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_iters { 0.5 } else { 0.8 };
        let num = Array2::from_shape_fn((m, m), |(i, j)| {
            if i == j {
                0.0
            } else {
                1.0 / (1.0 + (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2))
            }
        });
        let z = num.sum().max(1e-300);
        let mut grad = Array2::<f64>::zeros((m, 2));
        for i in 0..m {
            for j in 0..m {
                let w = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                grad[[i, 0]] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, v), gain) in grad.iter().zip(velocity.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*v > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            *v = momentum * *v - lr * *gain * g;
        }
        y += &velocity;
        for c in 0..2 {
            let mean = y.column(c).sum() / m as f64;
            y.column_mut(c).mapv_inplace(|v| v - mean);
        }
    }
    Ok(y)
}

pub fn project_2d(set: &EmbeddingSet, method: ProjectionMethod, seed: u64) -> Result<EmbeddingSet> {
    let coords = match method {
        ProjectionMethod::Pca => pca_2d(set.vectors.view())?.0,
        ProjectionMethod::Tsne => tsne_2d(set.vectors.view(), &TsneConfig { seed, ..TsneConfig::default() })?,
    };
    Ok(EmbeddingSet { coords2d: Some(coords), method: Some(method), ..set.clone() })
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette_score(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    require_points(x)?;
    if labels.len() != x.nrows() {
        return Err(Error::validation("labels", "length differs from point count"));
    }
    let n_clusters = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if n_clusters < 2 {
        return Err(Error::validation("labels", "silhouette needs at least two clusters"));
    }
    let k = labels.iter().max().map_or(0, |&v| v + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let m = x.nrows();
    let mut total = 0.0;
    for i in 0..m {
        let mut sums = vec![0.0f64; k];
        for j in 0..m {
            if i != j {
                sums[labels[j]] += x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn planar_points(m: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        let basis = [[1.0, 2.0, -1.0, 0.5, 0.0], [0.0, -1.0, 0.5, 2.0, 1.0]];
        let coef: Vec<(f64, f64)> = (0..m).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0))).collect();
        Array2::from_shape_fn((m, 5), |(i, j)| 0.7 + coef[i].0 * basis[0][j] + coef[i].1 * basis[1][j])
    }

    #[test]
    fn pca_reconstructs_a_plane() {
        let x = planar_points(40, 1);
        let (coords, comps, mean) = pca_2d(x.view()).unwrap();
        let recon = coords.dot(&comps) + &ndarray::Array1::from(mean);
        let err = (&recon - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6, "{err}");
        assert_eq!(pca_2d(x.view()).unwrap().0, coords);
    }

    #[test]
    fn pca_sign_convention() {
        let x = planar_points(30, 2);
        let (_, comps, _) = pca_2d(x.view()).unwrap();
        for row in comps.rows() {
            let pivot = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
        let (_, flipped, _) = pca_2d((-&x).view()).unwrap();
        assert!((&flipped - &comps).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn tsne_is_seeded() {
        let x = planar_points(25, 3);
        let cfg = TsneConfig { iterations: 200, seed: 4, ..TsneConfig::default() };
        let a = tsne_2d(x.view(), &cfg).unwrap();
        assert_eq!(a, tsne_2d(x.view(), &cfg).unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
        assert_ne!(a, tsne_2d(x.view(), &TsneConfig { seed: 5, ..cfg }).unwrap());
    }

    #[test]
    fn too_few_points() {
        let x = Array2::zeros((1, 3));
        assert!(pca_2d(x.view()).unwrap_err().is_validation());
        assert!(tsne_2d(x.view(), &TsneConfig::default()).unwrap_err().is_validation());
    }

    #[test]
    fn silhouette_of_separated_clusters() {
        let x = ndarray::array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        // a = 1, b = mean(10, sqrt(101)) for every point
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        let expected = (b - 1.0) / b;
        assert!((silhouette_score(x.view(), &[0, 0, 1, 1]).unwrap() - expected).abs() < 1e-12);
        assert!(silhouette_score(x.view(), &[0, 0, 0, 0]).is_err());
    }
}

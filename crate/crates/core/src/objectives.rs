//! Contrastive and supervised losses with analytic gradients, in `f64`.
//!
//! * NT-Xent over `2N` projections where rows `2k` and `2k + 1` are the two
//!   views of source `k`. For anchor `i` with positive `j`,
//!   `l(i, j) = -log( exp(cos(z_i, z_j) / t) / sum_{k != i} exp(cos(z_i, z_k) / t) )`
//!   and the loss is the mean over all `2N` anchors.
//! * Symmetric negative cosine with stop-gradient on the projector branch:
//!   `0.5 * mean D(p1, z2) + 0.5 * mean D(p2, z1)`, `D(p, z) = -<p/|p|, z/|z|>`.
//!   Gradients flow into `p1` and `p2` only.
//! * Mean cross-entropy over 9 classes.
//!
//! Rows with zero norm are rejected rather than patched with an epsilon.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::data::N_CLASSES;
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// A scalar loss with its gradient with respect to the input rows.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Projections for NT-Xent, arranged in positive pairs `(2k, 2k + 1)`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub projections: ArrayView2<'a, f64>,
    pub temperature: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(projections: ArrayView2<'a, f64>, temperature: f64) -> Result<Self> {
        let b = ContrastiveBatch { projections, temperature };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::validation(
                "temperature",
                format!("{} must be positive", self.temperature),
            ));
        }
        let (rows, d) = self.projections.dim();
        if rows < 2 || rows % 2 != 0 {
            return Err(Error::validation(
                "projections",
                format!("need an even number (>= 2) of rows, got {rows}"),
            ));
        }
        if d == 0 {
            return Err(Error::validation("projections", "zero-width rows"));
        }
        check_rows("projections", self.projections)?;
        Ok(())
    }
}

/// Predictor outputs `p*` and projector outputs `z*` for both views.
#[derive(Debug, Clone, Copy)]
pub struct SiamBatch<'a> {
    pub p1: ArrayView2<'a, f64>,
    pub p2: ArrayView2<'a, f64>,
    pub z1: ArrayView2<'a, f64>,
    pub z2: ArrayView2<'a, f64>,
}

impl SiamBatch<'_> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.p1.dim();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::validation("p1", "empty batch"));
        }
        for (name, m) in [("p1", self.p1), ("p2", self.p2), ("z1", self.z1), ("z2", self.z2)] {
            if m.dim() != shape {
                return Err(Error::validation(
                    name,
                    format!("shape {:?} differs from p1 {:?}", m.dim(), shape),
                ));
            }
            check_rows(name, m)?;
        }
        Ok(())
    }
}

/// Loss and gradients of the stop-gradient objective. `grad_z1` and
/// `grad_z2` are always exactly zero.
#[derive(Debug, Clone)]
pub struct SiamLoss {
    pub loss: f64,
    pub grad_p1: Array2<f64>,
    pub grad_p2: Array2<f64>,
    pub grad_z1: Array2<f64>,
    pub grad_z2: Array2<f64>,
}

fn check_rows(name: &str, m: ArrayView2<f64>) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(name, format!("row {i} is not finite")));
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::validation(
                name,
                format!("row {i} has zero norm; cosine similarity is undefined"),
            ));
        }
    }
    Ok(())
}

/// Unit-normalized rows and the original row norms.
fn normalize_rows(m: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut u = m.to_owned();
    for (mut row, &n) in u.axis_iter_mut(Axis(0)).zip(&norms) {
        row /= n;
    }
    (u, norms)
}

/// Back-propagates a gradient w.r.t. unit rows `u = x / |x|` to `x`:
/// `dx = (du - <du, u> u) / |x|`.
fn unnormalize_grad(du: &Array2<f64>, u: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut dx = du.clone();
    for ((mut g, ui), &n) in dx.axis_iter_mut(Axis(0)).zip(u.axis_iter(Axis(0))).zip(norms) {
        let radial = g.dot(&ui);
        Zip::from(&mut g).and(&ui).for_each(|g, &u| *g = (*g - radial * u) / n);
    }
    dx
}

/// Index of the positive partner of row `i` under the `(2k, 2k + 1)` layout.
pub fn positive_of(i: usize) -> usize {
    i ^ 1
}

/// NT-Xent loss and its gradient w.r.t. the projections.
pub fn nt_xent_loss(batch: &ContrastiveBatch) -> Result<LossGrad> {
    batch.validate()?;
    let tau = batch.temperature;
    let rows = batch.projections.nrows();
    let (u, norms) = normalize_rows(batch.projections);
    let logits = u.dot(&u.t()) / tau;

    // coef[i][k] = dL/dlogit[i][k]
    let mut coef = Array2::<f64>::zeros((rows, rows));
    let mut loss = 0.0;
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let pos = positive_of(i);
        let row = logits.row(i);
        let max = (0..rows)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - row[pos];
        for k in (0..rows).filter(|&k| k != i) {
            coef[[i, k]] = scale * (row[k] - lse).exp();
        }
        coef[[i, pos]] -= scale;
    }
    loss *= scale;

    // logit[i][k] = <u_i, u_k> / tau, so dL/du = (coef + coef^T) u / tau
    let sym = &coef + &coef.t();
    let du = sym.dot(&u) / tau;
    Ok(LossGrad {
        loss: loss.max(0.0),
        grad: unnormalize_grad(&du, &u, &norms),
    })
}

fn neg_cosine_half(p: ArrayView2<f64>, z: ArrayView2<f64>, weight: f64) -> (f64, Array2<f64>) {
    let (pu, pn) = normalize_rows(p);
    let (zu, _) = normalize_rows(z);
    let mut loss = 0.0;
    for (a, b) in pu.axis_iter(Axis(0)).zip(zu.axis_iter(Axis(0))) {
        loss -= a.dot(&b);
    }
    // d(-<pu, zu>)/dpu = -zu
    let du = zu.mapv(|v| -v * weight);
    (loss * weight, unnormalize_grad(&du, &pu, &pn))
}

/// Symmetric stop-gradient negative cosine loss.
pub fn simsiam_loss(batch: &SiamBatch) -> Result<SiamLoss> {
    batch.validate()?;
    let weight = 0.5 / batch.p1.nrows() as f64;
    let (l1, grad_p1) = neg_cosine_half(batch.p1, batch.z2, weight);
    let (l2, grad_p2) = neg_cosine_half(batch.p2, batch.z1, weight);
    Ok(SiamLoss {
        loss: (l1 + l2).clamp(-1.0, 1.0),
        grad_p1,
        grad_p2,
        grad_z1: Array2::zeros(batch.z1.dim()),
        grad_z2: Array2::zeros(batch.z2.dim()),
    })
}

/// Mean cross-entropy of `(B, 9)` logits against class indices, with the
/// gradient w.r.t. the logits.
pub fn cross_entropy_9way(logits: ArrayView2<f64>, labels: &[usize]) -> Result<LossGrad> {
    let (b, c) = logits.dim();
    if c != N_CLASSES {
        return Err(Error::validation("logits", format!("expected 9 columns, got {c}")));
    }
    if b == 0 || labels.len() != b {
        return Err(Error::validation(
            "labels",
            format!("{} labels for {b} logit rows", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(Error::validation("labels", format!("label {bad} outside 0..9")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("logits", "non-finite logit"));
    }
    let mut grad = Array2::<f64>::zeros((b, c));
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        Zip::from(&mut g).and(&row).for_each(|g, &v| *g = (v - lse).exp() / b as f64);
        g[y] -= 1.0 / b as f64;
    }
    Ok(LossGrad { loss: (loss / b as f64).max(0.0), grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pair_has_no_negatives() {
        let z = array![[0.3, -1.0, 2.0], [-4.0, 0.5, 0.1]];
        let out = nt_xent_loss(&ContrastiveBatch::new(z.view(), 0.5).unwrap()).unwrap();
        assert!(out.loss.abs() <= 1e-9);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn nt_xent_rejects_bad_batches() {
        let z = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(nt_xent_loss(&ContrastiveBatch { projections: z.view(), temperature: 0.5 }).is_err());
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        for t in [0.0, -1.0, f64::NAN] {
            assert!(ContrastiveBatch::new(z.view(), t).is_err());
        }
        let odd = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert!(ContrastiveBatch::new(odd.view(), 0.5).is_err());
    }

    #[test]
    fn simsiam_alignment_and_orthogonality() {
        let a = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]];
        let b = array![[-2.0, 1.0, 0.0], [3.0, 1.0, 1.0]];
        let aligned = simsiam_loss(&SiamBatch { p1: a.view(), p2: b.view(), z1: b.view(), z2: a.view() }).unwrap();
        assert!((aligned.loss + 1.0).abs() <= 1e-9);
        let e1 = array![[1.0, 0.0], [0.0, 2.0]];
        let e2 = array![[0.0, 3.0], [-1.0, 0.0]];
        let orth = simsiam_loss(&SiamBatch { p1: e1.view(), p2: e2.view(), z1: e1.view(), z2: e2.view() }).unwrap();
        assert!(orth.loss.abs() <= 1e-9);
        assert!(orth.grad_z1.iter().chain(orth.grad_z2.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn simsiam_rejects_zero_rows_and_shape_mismatch() {
        let a = array![[1.0, 2.0], [0.0, 0.0]];
        let b = array![[1.0, 2.0], [1.0, 0.0]];
        assert!(simsiam_loss(&SiamBatch { p1: a.view(), p2: b.view(), z1: b.view(), z2: b.view() }).is_err());
        let c = array![[1.0, 2.0, 3.0], [1.0, 0.0, 0.0]];
        assert!(simsiam_loss(&SiamBatch { p1: b.view(), p2: c.view(), z1: b.view(), z2: b.view() }).is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        let zeros = Array2::<f64>::zeros((3, 9));
        let out = cross_entropy_9way(zeros.view(), &[0, 4, 8]).unwrap();
        assert!((out.loss - 9f64.ln()).abs() <= 1e-9);
        let mut peaked = Array2::<f64>::zeros((2, 9));
        peaked[[0, 3]] = 50.0;
        peaked[[1, 7]] = 50.0;
        assert!(cross_entropy_9way(peaked.view(), &[3, 7]).unwrap().loss <= 1e-9);
        assert!(cross_entropy_9way(zeros.view(), &[0, 9, 1]).unwrap_err().is_validation());
        assert!(cross_entropy_9way(zeros.view(), &[0, 1]).is_err());
    }

    #[test]
    fn temperature_is_validated_in_nt_xent() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let err = nt_xent_loss(&ContrastiveBatch { projections: z.view(), temperature: 0.0 }).unwrap_err();
        assert!(err.is_validation());
    }
}

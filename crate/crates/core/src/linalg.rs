//! Dense linear algebra used by the envelope builder and the feature reducer.
//!
//! Everything here works on [`Mat`] (an `ndarray::Array2<f64>`) and is
//! single-threaded so repeated calls are bit-reproducible.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat = Array2<f64>;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is empty")]
    Empty,
    #[error("jacobi svd did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

/// Thin singular value decomposition `a = u * diag(s) * v^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x r` with orthonormal columns.
    pub u: Mat,
    /// Non-increasing, length `r = min(m, n)`.
    pub s: Array1<f64>,
    /// `n x r` with orthonormal columns.
    pub v: Mat,
}

impl Svd {
    pub fn reconstruct(&self) -> Mat {
        let scaled = &self.u * &self.s.view().insert_axis(Axis(0));
        scaled.dot(&self.v.t())
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Mat) -> Result<Svd, LinalgError> {
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return Err(LinalgError::Empty);
    }
    if m < n {
        let t = svd(&a.t().to_owned())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }

    // cols[j] holds column j of `a`; vt[j] holds column j of V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut vt: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // Columns below this squared norm are roundoff; rotating them changes no
    // singular value above eps * ||A||_F and can cycle forever.
    let negligible = a.iter().map(|x| x * x).sum::<f64>() * 1e-30;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..m {
                        alpha += cp[k] * cp[k];
                        beta += cq[k] * cq[k];
                        gamma += cp[k] * cq[k];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0
                    || gamma.abs() <= 1e-15 * (alpha * beta).sqrt()
                    || alpha.min(beta) <= negligible
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(MAX_SWEEPS));
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms[order[0]];
    let cutoff = scale * (m as f64) * f64::EPSILON;
    let mut u = Mat::zeros((m, n));
    let mut v = Mat::zeros((n, n));
    let mut s = Array1::zeros(n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s[dst] = sigma;
        for k in 0..n {
            v[[k, dst]] = vt[src][k];
        }
        if sigma > cutoff && sigma > 0.0 {
            for k in 0..m {
                u[[k, dst]] = cols[src][k] / sigma;
            }
        } else {
            missing.push(dst);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(Svd { u, s, v })
}

fn rotate_pair(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = vecs.split_at_mut(q);
    let vp = &mut head[p];
    let vq = &mut tail[0];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all the
/// other columns (modified Gram-Schmidt over the canonical basis).
fn complete_orthonormal(u: &mut Mat, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0;
    for &col in missing {
        while basis < m {
            let mut cand = Array1::<f64>::zeros(m);
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = u.column(f).dot(&cand);
                    cand.scaled_add(-proj, &u.column(f));
                }
            }
            let norm = cand.dot(&cand).sqrt();
            if norm > 1e-8 {
                u.column_mut(col).assign(&(cand / norm));
                filled.push(col);
                break;
            }
        }
    }
}

/// Proximal operator of `tau * ||.||_*`: soft-thresholds the singular values.
pub fn svt(a: &Mat, tau: f64) -> Result<Mat, LinalgError> {
    if !(tau >= 0.0) {
        return Err(LinalgError::InvalidParameter(format!("tau must be >= 0, got {tau}")));
    }
    let dec = svd(a)?;
    Ok(svt_from(&dec, tau))
}

pub(crate) fn svt_from(dec: &Svd, tau: f64) -> Mat {
    let (m, n) = (dec.u.nrows(), dec.v.nrows());
    let mut out = Mat::zeros((m, n));
    for (k, &sigma) in dec.s.iter().enumerate() {
        let shrunk = sigma - tau;
        if shrunk <= 0.0 {
            break;
        }
        let uk = dec.u.column(k);
        let vk = dec.v.column(k);
        for i in 0..m {
            let ui = uk[i] * shrunk;
            if ui == 0.0 {
                continue;
            }
            let mut row = out.row_mut(i);
            row.scaled_add(ui, &vk);
        }
    }
    out
}

pub fn nuclear_norm(a: &Mat) -> Result<f64, LinalgError> {
    Ok(svd(a)?.s.sum())
}

/// Unbiased sample covariance of the columns of `v` (rows are samples).
pub fn covariance(v: &Mat) -> Result<Mat, LinalgError> {
    let n = v.nrows();
    if n < 2 {
        return Err(LinalgError::TooFewSamples(n));
    }
    let mean = v.mean_axis(Axis(0)).expect("non-empty");
    let centered = v - &mean.insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let m = cov.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let x = cov[[i, j]];
            cov[[j, i]] = x;
        }
    }
    Ok(cov)
}

/// Per-column unbiased variance (the covariance diagonal).
pub fn column_variances(v: &Mat) -> Result<Array1<f64>, LinalgError> {
    let n = v.nrows();
    if n < 2 {
        return Err(LinalgError::TooFewSamples(n));
    }
    let mean = v.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::zeros(v.ncols());
    for row in v.rows() {
        for ((acc, &x), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let d: f64 = x - mu;
            *acc += d * d;
        }
    }
    Ok(var / (n as f64 - 1.0))
}

/// Fitted principal component projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `m x k`, orthonormal columns, ordered by decreasing variance.
    pub components: Mat,
    /// Variance along every principal direction, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat, LinalgError> {
        if x.ncols() != self.input_dim() {
            return Err(LinalgError::ShapeMismatch {
                expected: format!("{} columns", self.input_dim()),
                got: format!("{} columns", x.ncols()),
            });
        }
        let mean = Array1::from(self.mean.clone());
        let centered = x - &mean.insert_axis(Axis(0));
        Ok(centered.dot(&self.components))
    }
}

/// Keeps the smallest number of leading components whose cumulative explained
/// variance reaches `retained_variance`.
pub fn pca_fit(x: &Mat, retained_variance: f64) -> Result<Pca, LinalgError> {
    if !(retained_variance > 0.0 && retained_variance <= 1.0) {
        return Err(LinalgError::InvalidParameter(format!(
            "retained variance must lie in (0, 1], got {retained_variance}"
        )));
    }
    let n = x.nrows();
    if n < 2 {
        return Err(LinalgError::TooFewSamples(n));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean.view().insert_axis(Axis(0));
    let dec = svd(&centered)?;
    let explained: Vec<f64> = dec.s.iter().map(|s| s * s / (n as f64 - 1.0)).collect();
    let total: f64 = explained.iter().sum();

    let mut k = 1;
    if total > 0.0 {
        let mut acc = 0.0;
        for (i, ev) in explained.iter().enumerate() {
            acc += ev;
            if acc / total >= retained_variance - 1e-12 {
                k = i + 1;
                break;
            }
        }
    }
    let components = dec.v.slice(ndarray::s![.., ..k]).to_owned();
    Ok(Pca {
        mean: mean.to_vec(),
        components,
        explained_variance: explained,
    })
}

pub fn pca_transform(pca: &Pca, x: &Mat) -> Result<Mat, LinalgError> {
    pca.transform(x)
}

pub fn frobenius_sq(a: &Mat) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

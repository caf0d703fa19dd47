//! Per-layer prediction: PCA feature reduction followed by a one-vs-rest
//! linear SVM, plus accuracy bookkeeping.

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{pca_fit, LinalgError, Mat, Pca};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("need at least 2 training samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Misclassification cost; the per-sample regulariser is `1 / (c n)`.
    pub c: f64,
    pub epochs: usize,
    /// Initial step; epoch `t` uses `eta0 / (1 + t)`.
    pub eta0: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 300,
            eta0: 0.01,
        }
    }
}

/// `(reg / 2) ||w||^2 + mean_i max(0, 1 - y_i (w . x_i + b))` with `y_i` in {-1, +1}.
pub fn hinge_objective(w: &Array1<f64>, b: f64, x: &Mat, y: &[f64], reg: f64) -> f64 {
    let margins = x.dot(w) + b;
    let hinge: f64 = margins
        .iter()
        .zip(y)
        .map(|(m, yi)| (1.0 - yi * m).max(0.0))
        .sum();
    0.5 * reg * w.dot(w) + hinge / x.nrows() as f64
}

/// A subgradient of [`hinge_objective`]; exact wherever no margin equals 1.
pub fn hinge_subgradient(w: &Array1<f64>, b: f64, x: &Mat, y: &[f64], reg: f64) -> (Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let margins = x.dot(w) + b;
    let mut gw = w * reg;
    let mut gb = 0.0;
    for (i, (m, &yi)) in margins.iter().zip(y).enumerate() {
        if yi * m < 1.0 {
            gw.scaled_add(-yi / n, &x.row(i));
            gb -= yi / n;
        }
    }
    (gw, gb)
}

/// One binary machine trained by shuffled stochastic subgradient descent.
/// Returns `(w, b, objective before training, objective after training)`.
pub fn train_binary(
    x: &Mat,
    y: &[f64],
    cfg: &SvmConfig,
    rng: &mut ChaCha8Rng,
) -> (Array1<f64>, f64, f64, f64) {
    let n = x.nrows();
    let reg = 1.0 / (cfg.c * n as f64);
    let mut w = Array1::zeros(x.ncols());
    let mut b = 0.0;
    let initial = hinge_objective(&w, b, x, y, reg);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let eta = cfg.eta0 / (1.0 + epoch as f64);
        order.shuffle(rng);
        for &i in &order {
            let xi = x.row(i);
            let margin = y[i] * (xi.dot(&w) + b);
            w *= 1.0 - eta * reg;
            if margin < 1.0 {
                w.scaled_add(eta * y[i], &xi);
                b += eta * y[i];
            }
        }
    }
    let fin = hinge_objective(&w, b, x, y, reg);
    (w, b, initial, fin)
}

/// One-vs-rest linear SVM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    /// `C x k`, one row per class machine.
    pub weights: Mat,
    pub biases: Array1<f64>,
    /// Objective of every machine before and after training.
    pub objectives: Vec<(f64, f64)>,
}

impl LinearSvm {
    pub fn fit(
        x: &Mat,
        labels: &[usize],
        class_count: usize,
        cfg: &SvmConfig,
        seed: u64,
    ) -> Result<Self, ClassifyError> {
        if x.nrows() != labels.len() {
            return Err(ClassifyError::LengthMismatch(x.nrows(), labels.len()));
        }
        if !(cfg.c > 0.0 && cfg.eta0 > 0.0) {
            return Err(ClassifyError::InvalidParameter("c and eta0 must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Mat::zeros((class_count, x.ncols()));
        let mut biases = Array1::zeros(class_count);
        let mut objectives = Vec::with_capacity(class_count);
        for class in 0..class_count {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == class { 1.0 } else { -1.0 })
                .collect();
            let (w, b, before, after) = train_binary(x, &y, cfg, &mut rng);
            weights.row_mut(class).assign(&w);
            biases[class] = b;
            objectives.push((before, after));
        }
        Ok(Self {
            weights,
            biases,
            objectives,
        })
    }

    /// Raw margins, `m x C`.
    pub fn scores(&self, x: &Mat) -> Mat {
        x.dot(&self.weights.t()) + &self.biases
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub scores: Mat,
}

#[derive(Debug, Clone)]
pub struct LayerPredictor {
    pub pca: Pca,
    pub svm: LinearSvm,
    pub fuse_original: bool,
    pub envelope_width: usize,
    pub deep_width: usize,
}

fn feature_matrix(envelope: &Mat, deep: &Mat, fuse_original: bool) -> Mat {
    if fuse_original {
        ndarray::concatenate(Axis(1), &[envelope.view(), deep.view()]).expect("row counts agree")
    } else {
        deep.clone()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fit_predictor(
    envelope: &Mat,
    deep: &Mat,
    labels: &[usize],
    class_count: usize,
    retained_variance: f64,
    svm_cfg: &SvmConfig,
    fuse_original: bool,
    seed: u64,
) -> Result<LayerPredictor, ClassifyError> {
    let n = envelope.nrows();
    if deep.nrows() != n || labels.len() != n {
        return Err(ClassifyError::ShapeMismatch(format!(
            "{n} envelope rows, {} deep rows, {} labels",
            deep.nrows(),
            labels.len()
        )));
    }
    if n < 2 {
        return Err(ClassifyError::TooFewSamples(n));
    }
    let features = feature_matrix(envelope, deep, fuse_original);
    let pca = pca_fit(&features, retained_variance)?;
    let reduced = pca.transform(&features)?;
    let svm = LinearSvm::fit(&reduced, labels, class_count, svm_cfg, seed)?;
    Ok(LayerPredictor {
        pca,
        svm,
        fuse_original,
        envelope_width: envelope.ncols(),
        deep_width: deep.ncols(),
    })
}

impl LayerPredictor {
    pub fn predict(&self, envelope: &Mat, deep: &Mat) -> Result<Prediction, ClassifyError> {
        if envelope.ncols() != self.envelope_width
            || deep.ncols() != self.deep_width
            || envelope.nrows() != deep.nrows()
        {
            return Err(ClassifyError::ShapeMismatch(format!(
                "expected widths ({}, {}), got ({}, {})",
                self.envelope_width,
                self.deep_width,
                envelope.ncols(),
                deep.ncols()
            )));
        }
        let features = feature_matrix(envelope, deep, self.fuse_original);
        let scores = self.svm.scores(&self.pca.transform(&features)?);
        let labels = scores.rows().into_iter().map(argmax).collect();
        Ok(Prediction { labels, scores })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Recall per true class; `NaN`-free, classes without samples get 0.
    pub recall: Vec<f64>,
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn score(truth: &[usize], pred: &[usize], class_count: usize) -> Result<Metrics, ClassifyError> {
    if truth.len() != pred.len() {
        return Err(ClassifyError::LengthMismatch(truth.len(), pred.len()));
    }
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= class_count || p >= class_count {
            return Err(ClassifyError::InvalidParameter(format!(
                "label outside [0, {class_count})"
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..class_count).map(|c| confusion[c][c]).sum();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    let recall = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(Metrics {
        accuracy,
        recall,
        confusion,
    })
}

//! Fusion of the three per-layer predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{argmax, Prediction};
use crate::linalg::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("grid step {0} does not divide 1")]
    InvalidStep(f64),
    #[error("fusion mode {0:?} cannot be used here")]
    ModeMismatch(FusionMode),
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("prediction lengths differ: {0}")]
    LengthMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Round the weighted sum of label indices.
    WfLiteral,
    /// Argmax of the weighted sum of score matrices.
    WfScore,
    /// Majority vote.
    Mv,
}

impl FusionMode {
    pub fn default_for(class_count: usize) -> Self {
        if class_count <= 2 {
            FusionMode::WfLiteral
        } else {
            FusionMode::WfScore
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w: [f64; 3],
    pub mode: FusionMode,
    pub grid_step: f64,
    /// Number of correct validation samples at `w`.
    pub validation_correct: usize,
}

fn grid_divisions(step: f64) -> Result<usize, EnsembleError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(EnsembleError::InvalidStep(step));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(EnsembleError::InvalidStep(step));
    }
    Ok(n as usize)
}

/// Simplex grid points `(i, j, n - i - j) / n` in lexicographic order of `(i, j)`.
pub fn simplex_grid(step: f64) -> Result<Vec<[f64; 3]>, EnsembleError> {
    let n = grid_divisions(step)?;
    let nf = n as f64;
    let mut out = Vec::with_capacity((n + 1) * (n + 2) / 2);
    for i in 0..=n {
        for j in 0..=n - i {
            out.push([i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf]);
        }
    }
    Ok(out)
}

/// Round half to even, treating values within 1e-9 of a half-integer as exact halves
/// so that grid weights such as 0.15 + 0.35 behave like their decimal values.
pub fn round_label(value: f64, class_count: usize) -> usize {
    let doubled = 2.0 * value;
    let nearest = doubled.round();
    let snapped = if (doubled - nearest).abs() < 1e-9 {
        nearest / 2.0
    } else {
        value
    };
    let r = snapped.round_ties_even().max(0.0);
    (r as usize).min(class_count.saturating_sub(1))
}

fn check_lengths(layers: [&Prediction; 3], n: usize) -> Result<(), EnsembleError> {
    for (k, p) in layers.iter().enumerate() {
        if p.labels.len() != n || p.scores.nrows() != n {
            return Err(EnsembleError::LengthMismatch(format!(
                "layer {k} has {} labels and {} score rows, expected {n}",
                p.labels.len(),
                p.scores.nrows()
            )));
        }
    }
    Ok(())
}

fn fuse(w: &[f64; 3], layers: [&Prediction; 3], mode: FusionMode, class_count: usize) -> Vec<usize> {
    let n = layers[0].labels.len();
    match mode {
        FusionMode::WfLiteral => (0..n)
            .map(|i| {
                let v: f64 = (0..3).map(|k| w[k] * layers[k].labels[i] as f64).sum();
                round_label(v, class_count)
            })
            .collect(),
        FusionMode::WfScore => {
            let fused: Mat = &layers[0].scores * w[0] + &layers[1].scores * w[1] + &layers[2].scores * w[2];
            fused.rows().into_iter().map(argmax).collect()
        }
        FusionMode::Mv => unreachable!("callers reject mv"),
    }
}

/// Exhaustive simplex-grid search for the weights maximising validation hits.
pub fn wf_fit(
    layers: [&Prediction; 3],
    val_labels: &[usize],
    class_count: usize,
    mode: FusionMode,
    grid_step: f64,
) -> Result<FusionWeights, EnsembleError> {
    if mode == FusionMode::Mv {
        return Err(EnsembleError::ModeMismatch(mode));
    }
    let grid = simplex_grid(grid_step)?;
    if val_labels.is_empty() {
        return Err(EnsembleError::EmptyValidation);
    }
    check_lengths(layers, val_labels.len())?;
    let mut best: Option<([f64; 3], usize)> = None;
    for w in grid {
        let pred = fuse(&w, layers, mode, class_count);
        let hits = pred.iter().zip(val_labels).filter(|(p, y)| p == y).count();
        if best.is_none_or(|(_, h)| hits > h) {
            best = Some((w, hits));
        }
    }
    let (w, validation_correct) = best.expect("grid is never empty");
    Ok(FusionWeights {
        w,
        mode,
        grid_step,
        validation_correct,
    })
}

pub fn wf_predict(
    weights: &FusionWeights,
    layers: [&Prediction; 3],
    class_count: usize,
) -> Result<Vec<usize>, EnsembleError> {
    if weights.mode == FusionMode::Mv {
        return Err(EnsembleError::ModeMismatch(weights.mode));
    }
    check_lengths(layers, layers[0].labels.len())?;
    Ok(fuse(&weights.w, layers, weights.mode, class_count))
}

/// Per-sample vote count; ties go to the lowest class.
pub fn mv_predict(layers: [&[usize]; 3], class_count: usize) -> Result<Vec<usize>, EnsembleError> {
    let n = layers[0].len();
    if layers.iter().any(|l| l.len() != n) {
        return Err(EnsembleError::LengthMismatch("vote vectors differ in length".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut counts = vec![0usize; class_count];
    for i in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for l in &layers {
            let label = l[i];
            if label >= class_count {
                return Err(EnsembleError::LabelOutOfRange {
                    label,
                    classes: class_count,
                });
            }
            counts[label] += 1;
        }
        let mut best = 0;
        for c in 1..class_count {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

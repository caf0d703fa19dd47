//! CSV ingestion, label encoding, min-max scaling and stratified thirds.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("cannot read {path}: {reason}")]
    MissingFile { path: String, reason: String },
    #[error("row {0} does not match the header arity")]
    RaggedRow(usize),
    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),
    #[error("table needs at least 2 columns and 2 data rows")]
    TooSmall,
    #[error("non-numeric cell at row {row}, column {col}")]
    NonNumericCell { row: usize, col: usize },
    #[error("only one distinct label")]
    SingleClass,
    #[error("training index set is empty")]
    EmptyTrainSet,
    #[error("class {0} has fewer than 3 samples")]
    ClassTooSmall(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    /// Parses comma-separated text with a mandatory header. No quoting.
    pub fn parse(text: &str, label_column: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(DatasetError::TooSmall)?;
        let column_names: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        if !column_names.iter().any(|c| c == label_column) {
            return Err(DatasetError::MissingLabelColumn(label_column.to_string()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() != column_names.len() {
                return Err(DatasetError::RaggedRow(i));
            }
            rows.push(cells);
        }
        if column_names.len() < 2 || rows.len() < 2 {
            return Err(DatasetError::TooSmall);
        }
        Ok(Self { column_names, rows })
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<RawTable, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::MissingFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    RawTable::parse(&text, label_column)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn decode(&self, label: usize) -> &str {
        &self.label_names[label]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        self.features.select(ndarray::Axis(0), idx)
    }

    pub fn select_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Encodes labels by lexicographic order of their raw text.
pub fn encode(table: &RawTable, label_column: &str) -> Result<Dataset, DatasetError> {
    let label_idx = table
        .column_names
        .iter()
        .position(|c| c == label_column)
        .ok_or_else(|| DatasetError::MissingLabelColumn(label_column.to_string()))?;
    let label_names: Vec<String> = table
        .rows
        .iter()
        .map(|r| r[label_idx].clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if label_names.len() < 2 {
        return Err(DatasetError::SingleClass);
    }
    let n = table.rows.len();
    let d = table.column_names.len() - 1;
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, row) in table.rows.iter().enumerate() {
        let mut j = 0;
        for (col, cell) in row.iter().enumerate() {
            if col == label_idx {
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or(DatasetError::NonNumericCell { row: i, col })?;
            features[[i, j]] = v;
            j += 1;
        }
        let raw = &row[label_idx];
        labels.push(label_names.binary_search(raw).expect("label collected above"));
    }
    Ok(Dataset {
        features,
        labels,
        class_count: label_names.len(),
        label_names,
    })
}

/// Min-max scaler fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit(features: &Mat, train_idx: &[usize]) -> Result<Self, DatasetError> {
        if train_idx.is_empty() {
            return Err(DatasetError::EmptyTrainSet);
        }
        let d = features.ncols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for &i in train_idx {
            for (j, &v) in features.row(i).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// Maps to `[0, 1]` with clamping; constant features map to 0.5.
    pub fn apply(&self, features: &Mat) -> Mat {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let span = self.max[j] - self.min[j];
                *v = if span > 0.0 {
                    ((*v - self.min[j]) / span).clamp(0.0, 1.0)
                } else {
                    0.5
                };
            }
        }
        out
    }
}

pub fn fit_scaler(data: &Dataset, train_idx: &[usize]) -> Result<Scaler, DatasetError> {
    Scaler::fit(&data.features, train_idx)
}

pub fn apply_scaler(scaler: &Scaler, features: &Mat) -> Mat {
    scaler.apply(features)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class, shuffles members with the seed and deals them round-robin into
/// train, validation and test. Each part is returned sorted.
pub fn stratified_split(data: &Dataset, seed: u64) -> Result<SplitIndices, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..data.class_count {
        let mut members: Vec<usize> = (0..data.n_samples())
            .filter(|&i| data.labels[i] == class)
            .collect();
        if members.len() < 3 {
            return Err(DatasetError::ClassTooSmall(class));
        }
        members.shuffle(&mut rng);
        for (k, idx) in members.into_iter().enumerate() {
            parts[k % 3].push(idx);
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, validation, test] = parts;
    Ok(SplitIndices {
        train,
        validation,
        test,
    })
}

//! On-disk model format.
//!
//! A model is stored as two files sharing a stem:
//!
//! * `<stem>.bin`: magic `ESAEBIN\0`, `u32` format version, `u32` block
//!   count, then one block per tensor: `u32` rows, `u32` cols and
//!   `rows * cols` little-endian `f64` values in row-major order. Blocks are
//!   `w1, b1, w2, b2` for every encoder in order, then the softmax weights
//!   and bias. Vectors are stored as `1 x len` blocks.
//! * `<stem>.meta.toml`: format version, widths, stacking mode, sparsity
//!   hyperparameters and the selected rows of every embedding unit.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{EncoderLayer, EsaeError, EsaeModel, Selection, SparsityParams, Stacking};
use crate::linalg::Mat;

pub const MAGIC: &[u8; 8] = b"ESAEBIN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format_version: u32,
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub class_count: usize,
    pub stacking: Stacking,
    pub lambda: f64,
    pub beta: f64,
    pub rho: f64,
    pub selection_rows: Vec<usize>,
    pub selections: Vec<Vec<usize>>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    let mut meta = stem.as_os_str().to_owned();
    meta.push(".meta.toml");
    (PathBuf::from(bin), PathBuf::from(meta))
}

fn push_block(buf: &mut Vec<u8>, rows: usize, cols: usize, values: impl Iterator<Item = f64>) {
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_mat(buf: &mut Vec<u8>, m: &Mat) {
    push_block(buf, m.nrows(), m.ncols(), m.iter().copied());
}

fn push_vec(buf: &mut Vec<u8>, v: &Array1<f64>) {
    push_block(buf, 1, v.len(), v.iter().copied());
}

pub fn encode_weights(model: &EsaeModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let blocks = 4 * model.layers.len() + 2;
    buf.extend_from_slice(&(blocks as u32).to_le_bytes());
    for l in &model.layers {
        push_mat(&mut buf, &l.w1);
        push_vec(&mut buf, &l.b1);
        push_mat(&mut buf, &l.w2);
        push_vec(&mut buf, &l.b2);
    }
    push_mat(&mut buf, &model.softmax_w);
    push_vec(&mut buf, &model.softmax_b);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], EsaeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EsaeError::Io("truncated weight file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, EsaeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<Mat, EsaeError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Mat::from_shape_vec((rows, cols), values).expect("length checked"))
    }

    fn vector(&mut self) -> Result<Array1<f64>, EsaeError> {
        let m = self.block()?;
        if m.nrows() != 1 {
            return Err(EsaeError::Io("expected a 1 x len vector block".into()));
        }
        Ok(m.row(0).to_owned())
    }
}

pub fn decode_weights(bytes: &[u8], meta: &ModelMeta) -> Result<EsaeModel, EsaeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(EsaeError::Io("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION || meta.format_version != FORMAT_VERSION {
        return Err(EsaeError::Io(format!("unsupported format version {version}")));
    }
    let blocks = r.u32()? as usize;
    if blocks != 4 * meta.hidden_widths.len() + 2 {
        return Err(EsaeError::Io("block count does not match metadata".into()));
    }
    let mut layers = Vec::new();
    for _ in &meta.hidden_widths {
        layers.push(EncoderLayer {
            w1: r.block()?,
            b1: r.vector()?,
            w2: r.block()?,
            b2: r.vector()?,
        });
    }
    let softmax_w = r.block()?;
    let softmax_b = r.vector()?;
    if r.pos != bytes.len() {
        return Err(EsaeError::Io("trailing bytes after last block".into()));
    }
    for (l, &w) in layers.iter().zip(&meta.hidden_widths) {
        if l.hidden_dim() != w || l.b1.len() != w || l.w2.dim() != (w, l.input_dim()) {
            return Err(EsaeError::Io("encoder shapes disagree with metadata".into()));
        }
    }
    if softmax_w.ncols() != meta.class_count || softmax_b.len() != meta.class_count {
        return Err(EsaeError::Io("softmax shape disagrees with metadata".into()));
    }
    let selections = meta
        .selections
        .iter()
        .zip(&meta.selection_rows)
        .map(|(sel, &rows)| Selection {
            rows,
            selected: sel.clone(),
        })
        .collect();
    Ok(EsaeModel {
        layers,
        selections,
        stacking: meta.stacking,
        softmax_w,
        softmax_b,
        sparsity: SparsityParams {
            lambda: meta.lambda,
            beta: meta.beta,
            rho: meta.rho,
        },
        input_width: meta.input_width,
    })
}

pub fn metadata(model: &EsaeModel) -> ModelMeta {
    ModelMeta {
        format_version: FORMAT_VERSION,
        input_width: model.input_width,
        hidden_widths: model.layers.iter().map(|l| l.hidden_dim()).collect(),
        class_count: model.class_count(),
        stacking: model.stacking,
        lambda: model.sparsity.lambda,
        beta: model.sparsity.beta,
        rho: model.sparsity.rho,
        selection_rows: model.selections.iter().map(|s| s.rows).collect(),
        selections: model.selections.iter().map(|s| s.selected.clone()).collect(),
    }
}

/// Writes `<stem>.bin` and `<stem>.meta.toml`.
pub fn save(model: &EsaeModel, stem: impl AsRef<Path>) -> Result<(), EsaeError> {
    let (bin, meta) = paths(stem.as_ref());
    let text = toml::to_string(&metadata(model)).map_err(|e| EsaeError::Io(e.to_string()))?;
    fs::write(&bin, encode_weights(model)).map_err(|e| EsaeError::Io(e.to_string()))?;
    fs::write(&meta, text).map_err(|e| EsaeError::Io(e.to_string()))?;
    Ok(())
}

pub fn load(stem: impl AsRef<Path>) -> Result<EsaeModel, EsaeError> {
    let (bin, meta) = paths(stem.as_ref());
    let text = fs::read_to_string(&meta).map_err(|e| EsaeError::Io(e.to_string()))?;
    let meta: ModelMeta = toml::from_str(&text).map_err(|e| EsaeError::Io(e.to_string()))?;
    let bytes = fs::read(&bin).map_err(|e| EsaeError::Io(e.to_string()))?;
    decode_weights(&bytes, &meta)
}

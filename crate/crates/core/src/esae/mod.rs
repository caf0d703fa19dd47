//! Embedded stacked sparse autoencoder.
//!
//! Each encoder is pretrained as a sigmoid autoencoder with L2 weight decay
//! and a KL sparsity penalty on the mean hidden activation. From the second
//! encoder on, the input is not the previous hidden layer itself: the
//! original envelope sample and the previous hidden output are concatenated
//! and the `2d` highest-variance columns of that concatenation are kept
//! (the embedding unit). After pretraining a softmax head is attached to the
//! last hidden layer and the stack is fine-tuned with cross-entropy.

pub mod io;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Mat};

pub const RHO_HAT_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EsaeError {
    #[error("need {needed} features to select from, got {got}")]
    TooFewFeatures { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("model file: {0}")]
    Io(String),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sum_j rho log(rho / rho_hat_j) + (1 - rho) log((1 - rho) / (1 - rho_hat_j))`
/// with every `rho_hat_j` clamped into `[1e-6, 1 - 1e-6]`.
pub fn kl_sparsity(rho: f64, rho_hat: &[f64]) -> f64 {
    rho_hat
        .iter()
        .map(|&r| {
            let r = r.clamp(RHO_HAT_CLAMP, 1.0 - RHO_HAT_CLAMP);
            rho * (rho / r).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - r)).ln()
        })
        .sum()
}

/// Binary `m x w` selection stored as the selected row of each column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub rows: usize,
    pub selected: Vec<usize>,
}

impl Selection {
    pub fn width(&self) -> usize {
        self.selected.len()
    }

    pub fn matrix(&self) -> Mat {
        let mut g = Mat::zeros((self.rows, self.selected.len()));
        for (j, &i) in self.selected.iter().enumerate() {
            g[[i, j]] = 1.0;
        }
        g
    }
}

/// Keeps the `width` columns of `v` with the largest sample variance, in
/// descending variance order (ties to the lower column index).
pub fn build_selection(v: &Mat, width: usize) -> Result<Selection, EsaeError> {
    let m = v.ncols();
    if m < width {
        return Err(EsaeError::TooFewFeatures { needed: width, got: m });
    }
    let var = linalg::column_variances(v)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(width);
    Ok(Selection { rows: m, selected: order })
}

/// Column gather `v * G`.
pub fn embed(v: &Mat, g: &Selection) -> Result<Mat, EsaeError> {
    if v.ncols() != g.rows {
        return Err(EsaeError::ShapeMismatch(format!(
            "input has {} columns, selection expects {}",
            v.ncols(),
            g.rows
        )));
    }
    Ok(v.select(Axis(1), &g.selected))
}

fn concat_cols(a: &Mat, b: &Mat) -> Mat {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    /// `in x hidden`
    pub w1: Mat,
    pub b1: Array1<f64>,
    /// `hidden x in`
    pub w2: Mat,
    pub b2: Array1<f64>,
}

impl EncoderLayer {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + hidden) as f64).sqrt();
        let w1 = Mat::from_shape_fn((input, hidden), |_| rng.random_range(-limit..limit));
        let w2 = Mat::from_shape_fn((hidden, input), |_| rng.random_range(-limit..limit));
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn encode(&self, x: &Mat) -> Mat {
        let mut z = x.dot(&self.w1) + &self.b1;
        z.mapv_inplace(sigmoid);
        z
    }

    pub fn decode(&self, h: &Mat) -> Mat {
        let mut z = h.dot(&self.w2) + &self.b2;
        z.mapv_inplace(sigmoid);
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityParams {
    /// L2 weight decay.
    pub lambda: f64,
    /// Weight of the KL sparsity term.
    pub beta: f64,
    /// Target mean activation.
    pub rho: f64,
}

impl Default for SparsityParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            beta: 0.1,
            rho: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub w1: Mat,
    pub b1: Array1<f64>,
    pub w2: Mat,
    pub b2: Array1<f64>,
}

/// Pretraining loss of one autoencoder on `x`, averaged over rows.
pub fn layer_loss(layer: &EncoderLayer, x: &Mat, params: &SparsityParams) -> f64 {
    let h = layer.encode(x);
    let r = layer.decode(&h);
    let n = x.nrows() as f64;
    let recon = linalg::frobenius_sq(&(&r - x)) / n;
    let decay = params.lambda * (linalg::frobenius_sq(&layer.w1) + linalg::frobenius_sq(&layer.w2));
    let rho_hat = h.mean_axis(Axis(0)).expect("non-empty batch");
    recon + decay + params.beta * kl_sparsity(params.rho, rho_hat.as_slice().unwrap())
}

/// Loss and its analytic gradient for one batch.
pub fn layer_loss_and_grad(
    layer: &EncoderLayer,
    x: &Mat,
    params: &SparsityParams,
) -> (f64, LayerGradients) {
    let n = x.nrows() as f64;
    let h = layer.encode(x);
    let r = layer.decode(&h);
    let diff = &r - x;
    let recon = linalg::frobenius_sq(&diff) / n;
    let decay = params.lambda * (linalg::frobenius_sq(&layer.w1) + linalg::frobenius_sq(&layer.w2));
    let rho_hat = h.mean_axis(Axis(0)).expect("non-empty batch");
    let kl = kl_sparsity(params.rho, rho_hat.as_slice().unwrap());

    let mut dz2 = diff * (2.0 / n);
    dz2.zip_mut_with(&r, |g, &rv| *g *= rv * (1.0 - rv));
    let w2 = h.t().dot(&dz2) + &(&layer.w2 * (2.0 * params.lambda));
    let b2 = dz2.sum_axis(Axis(0));

    let mut dh = dz2.dot(&layer.w2.t());
    if params.beta != 0.0 {
        let rho = params.rho;
        let sparse: Array1<f64> = rho_hat.mapv(|rh| {
            if rh < RHO_HAT_CLAMP || rh > 1.0 - RHO_HAT_CLAMP {
                0.0
            } else {
                params.beta * (-rho / rh + (1.0 - rho) / (1.0 - rh)) / n
            }
        });
        dh += &sparse;
    }
    dh.zip_mut_with(&h, |g, &hv| *g *= hv * (1.0 - hv));
    let w1 = x.t().dot(&dh) + &(&layer.w1 * (2.0 * params.lambda));
    let b1 = dh.sum_axis(Axis(0));

    (
        recon + decay + params.beta * kl,
        LayerGradients { w1, b1, w2, b2 },
    )
}

/// How consecutive encoders are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stacking {
    /// Embedding unit between encoders; every encoder consumes the input width.
    Embedded,
    /// Each encoder consumes the previous hidden layer directly.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden width of each encoder; empty means [`default_widths`].
    pub hidden_widths: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub sparsity: SparsityParams,
    pub stacking: Stacking,
    /// Fine-tune only the softmax head, leaving the encoders as pretrained.
    pub head_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_widths: Vec::new(),
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            pretrain_epochs: 200,
            finetune_epochs: 400,
            seed: 0,
            sparsity: SparsityParams::default(),
            stacking: Stacking::Embedded,
            head_only: false,
        }
    }
}

/// `[ceil(1.5 d), d, max(4, ceil(0.5 d))]`, each at least 2.
pub fn default_widths(d: usize) -> Vec<usize> {
    let d = d as f64;
    [(1.5 * d).ceil(), d, (0.5 * d).ceil().max(4.0)]
        .iter()
        .map(|&w| (w as usize).max(2))
        .collect()
}

impl TrainConfig {
    fn validate(&self) -> Result<(), EsaeError> {
        if self.hidden_widths.iter().any(|&w| w < 2) {
            return Err(EsaeError::InvalidConfig("hidden widths must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(EsaeError::InvalidConfig(
                "learning rate must be positive, momentum in [0, 1), batch size >= 1".into(),
            ));
        }
        let s = &self.sparsity;
        if s.lambda < 0.0 || s.beta < 0.0 || !(s.rho > 0.0 && s.rho < 1.0) {
            return Err(EsaeError::InvalidConfig("lambda, beta >= 0 and rho in (0, 1)".into()));
        }
        Ok(())
    }
}

fn momentum_step(param: &mut Mat, velocity: &mut Mat, grad: &Mat, lr: f64, mu: f64) {
    velocity.zip_mut_with(grad, |v, &g| *v = mu * *v - lr * g);
    *param += &*velocity;
}

fn momentum_step_vec(param: &mut Array1<f64>, velocity: &mut Array1<f64>, grad: &Array1<f64>, lr: f64, mu: f64) {
    velocity.zip_mut_with(grad, |v, &g| *v = mu * *v - lr * g);
    *param += &*velocity;
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.min(n).max(1)).map(|c| c.to_vec()).collect()
}

/// Pretrains one sparse autoencoder with momentum mini-batch descent.
/// Returns the layer and the full-data loss before training and after every
/// epoch.
pub fn pretrain_layer(
    input: &Mat,
    width: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EncoderLayer, Vec<f64>), EsaeError> {
    cfg.validate()?;
    if input.nrows() == 0 {
        return Err(EsaeError::ShapeMismatch("empty training input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = EncoderLayer::glorot(input.ncols(), width, &mut rng);
    let mut vel = LayerGradients {
        w1: Mat::zeros(layer.w1.dim()),
        b1: Array1::zeros(width),
        w2: Mat::zeros(layer.w2.dim()),
        b2: Array1::zeros(input.ncols()),
    };
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    let mut losses = vec![layer_loss(&layer, input, &cfg.sparsity)];
    for _ in 0..cfg.pretrain_epochs {
        for idx in batches(input.nrows(), cfg.batch_size, &mut rng) {
            let xb = input.select(Axis(0), &idx);
            let (_, g) = layer_loss_and_grad(&layer, &xb, &cfg.sparsity);
            momentum_step(&mut layer.w1, &mut vel.w1, &g.w1, lr, mu);
            momentum_step_vec(&mut layer.b1, &mut vel.b1, &g.b1, lr, mu);
            momentum_step(&mut layer.w2, &mut vel.w2, &g.w2, lr, mu);
            momentum_step_vec(&mut layer.b2, &mut vel.b2, &g.b2, lr, mu);
        }
        let loss = layer_loss(&layer, input, &cfg.sparsity);
        if !loss.is_finite() {
            return Err(EsaeError::NonFiniteLoss);
        }
        losses.push(loss);
    }
    Ok((layer, losses))
}

/// A trained stack with its softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsaeModel {
    pub layers: Vec<EncoderLayer>,
    /// One per encoder after the first when stacking is embedded.
    pub selections: Vec<Selection>,
    pub stacking: Stacking,
    /// `q x C`
    pub softmax_w: Mat,
    pub softmax_b: Array1<f64>,
    pub sparsity: SparsityParams,
    pub input_width: usize,
}

/// Intermediate values of a forward pass.
struct Forward {
    /// Input actually fed to each encoder.
    inputs: Vec<Mat>,
    /// Hidden activation of each encoder.
    hidden: Vec<Mat>,
}

impl EsaeModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width `q` of the deep features.
    pub fn deep_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_dim())
    }

    pub fn class_count(&self) -> usize {
        self.softmax_w.ncols()
    }

    fn layer_input(&self, k: usize, x: &Mat, prev: &Mat) -> Mat {
        match self.stacking {
            Stacking::Embedded => {
                let v = concat_cols(x, prev);
                v.select(Axis(1), &self.selections[k - 1].selected)
            }
            Stacking::Plain => prev.clone(),
        }
    }

    fn forward(&self, x: &Mat) -> Forward {
        let mut inputs = Vec::with_capacity(self.depth());
        let mut hidden: Vec<Mat> = Vec::with_capacity(self.depth());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 {
                x.clone()
            } else {
                self.layer_input(k, x, &hidden[k - 1])
            };
            hidden.push(layer.encode(&input));
            inputs.push(input);
        }
        Forward { inputs, hidden }
    }

    fn check_width(&self, x: &Mat) -> Result<(), EsaeError> {
        if x.ncols() != self.input_width {
            return Err(EsaeError::ShapeMismatch(format!(
                "model expects width {}, got {}",
                self.input_width,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Last hidden layer activations (the deep features).
    pub fn extract(&self, x: &Mat) -> Result<Mat, EsaeError> {
        self.check_width(x)?;
        let mut fwd = self.forward(x);
        Ok(fwd.hidden.pop().expect("at least one layer"))
    }

    pub fn predict_proba(&self, x: &Mat) -> Result<Mat, EsaeError> {
        let deep = self.extract(x)?;
        Ok(softmax_rows(&(deep.dot(&self.softmax_w) + &self.softmax_b)))
    }

    /// Mean cross-entropy plus weight decay on the encoder and head weights.
    pub fn finetune_loss(&self, x: &Mat, labels: &[usize]) -> f64 {
        self.finetune_loss_and_grad(x, labels).0
    }

    /// Fine-tuning loss and gradients: `(loss, encoder (dW1, db1) per layer,
    /// dW_softmax, db_softmax)`.
    pub fn finetune_loss_and_grad(&self, x: &Mat, labels: &[usize]) -> (f64, FinetuneGradients) {
        let n = x.nrows() as f64;
        let lambda = self.sparsity.lambda;
        let fwd = self.forward(x);
        let top = fwd.hidden.last().expect("at least one layer");
        let probs = softmax_rows(&(top.dot(&self.softmax_w) + &self.softmax_b));
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            ce -= probs[[i, y]].max(1e-300).ln();
        }
        let mut decay = linalg::frobenius_sq(&self.softmax_w);
        for l in &self.layers {
            decay += linalg::frobenius_sq(&l.w1);
        }
        let loss = ce / n + lambda * decay;

        let mut dz = probs;
        for (i, &y) in labels.iter().enumerate() {
            dz[[i, y]] -= 1.0;
        }
        dz /= n;
        let softmax_w = top.t().dot(&dz) + &(&self.softmax_w * (2.0 * lambda));
        let softmax_b = dz.sum_axis(Axis(0));
        let mut dh = dz.dot(&self.softmax_w.t());
        let mut encoders = vec![(Mat::zeros((0, 0)), Array1::zeros(0)); self.depth()];
        let d_in = x.ncols();
        for k in (0..self.depth()).rev() {
            let layer = &self.layers[k];
            let h = &fwd.hidden[k];
            dh.zip_mut_with(h, |g, &hv| *g *= hv * (1.0 - hv));
            let dw1 = fwd.inputs[k].t().dot(&dh) + &(&layer.w1 * (2.0 * lambda));
            let db1 = dh.sum_axis(Axis(0));
            if k > 0 {
                let d_input = dh.dot(&layer.w1.t());
                let prev_width = fwd.hidden[k - 1].ncols();
                dh = match self.stacking {
                    Stacking::Plain => d_input,
                    Stacking::Embedded => {
                        let mut d_prev = Mat::zeros((x.nrows(), prev_width));
                        for (j, &src) in self.selections[k - 1].selected.iter().enumerate() {
                            if src >= d_in {
                                let mut col = d_prev.column_mut(src - d_in);
                                col += &d_input.column(j);
                            }
                        }
                        d_prev
                    }
                };
            }
            encoders[k] = (dw1, db1);
        }
        (
            loss,
            FinetuneGradients {
                encoders,
                softmax_w,
                softmax_b,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneGradients {
    pub encoders: Vec<(Mat, Array1<f64>)>,
    pub softmax_w: Mat,
    pub softmax_b: Array1<f64>,
}

pub fn softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Diagnostics recorded while training.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Per encoder: full-data loss before training and after every epoch.
    pub pretrain_losses: Vec<Vec<f64>>,
    /// Full-data fine-tuning loss before and after every epoch.
    pub finetune_losses: Vec<f64>,
    /// Deep features of the training samples after fine-tuning.
    pub train_features: Mat,
}

/// Greedy layerwise pretraining followed by softmax fine-tuning.
pub fn train(
    samples: &Mat,
    labels: &[usize],
    class_count: usize,
    cfg: &TrainConfig,
) -> Result<(EsaeModel, TrainTrace), EsaeError> {
    cfg.validate()?;
    let n = samples.nrows();
    if n == 0 || labels.len() != n {
        return Err(EsaeError::ShapeMismatch(format!(
            "{n} samples with {} labels",
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= class_count) {
        return Err(EsaeError::InvalidConfig("label outside class range".into()));
    }
    let widths = if cfg.hidden_widths.is_empty() {
        default_widths(samples.ncols() / 2)
    } else {
        cfg.hidden_widths.clone()
    };
    let input_width = samples.ncols();
    let mut layers = Vec::with_capacity(widths.len());
    let mut selections = Vec::new();
    let mut pretrain_losses = Vec::new();
    let mut prev: Option<Mat> = None;
    for (k, &width) in widths.iter().enumerate() {
        let input = match (&prev, cfg.stacking) {
            (None, _) => samples.clone(),
            (Some(h), Stacking::Plain) => h.clone(),
            (Some(h), Stacking::Embedded) => {
                let v = concat_cols(samples, h);
                let g = build_selection(&v, input_width)?;
                let embedded = embed(&v, &g)?;
                selections.push(g);
                embedded
            }
        };
        let layer_seed = cfg.seed.wrapping_add(k as u64 + 1);
        let (layer, losses) = pretrain_layer(&input, width, cfg, layer_seed)?;
        prev = Some(layer.encode(&input));
        layers.push(layer);
        pretrain_losses.push(losses);
    }

    let q = *widths.last().expect("validated non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let limit = (6.0 / (q + class_count) as f64).sqrt();
    let mut model = EsaeModel {
        layers,
        selections,
        stacking: cfg.stacking,
        softmax_w: Mat::from_shape_fn((q, class_count), |_| rng.random_range(-limit..limit)),
        softmax_b: Array1::zeros(class_count),
        sparsity: cfg.sparsity,
        input_width,
    };

    let finetune_losses = finetune(&mut model, samples, labels, cfg, &mut rng)?;
    let train_features = model.extract(samples)?;
    Ok((
        model,
        TrainTrace {
            pretrain_losses,
            finetune_losses,
            train_features,
        },
    ))
}

fn finetune(
    model: &mut EsaeModel,
    samples: &Mat,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, EsaeError> {
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    let mut vel_enc: Vec<(Mat, Array1<f64>)> = model
        .layers
        .iter()
        .map(|l| (Mat::zeros(l.w1.dim()), Array1::zeros(l.b1.len())))
        .collect();
    let mut vel_w = Mat::zeros(model.softmax_w.dim());
    let mut vel_b = Array1::zeros(model.softmax_b.len());
    let mut losses = vec![model.finetune_loss(samples, labels)];
    for _ in 0..cfg.finetune_epochs {
        for idx in batches(samples.nrows(), cfg.batch_size, rng) {
            let xb = samples.select(Axis(0), &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (_, g) = model.finetune_loss_and_grad(&xb, &yb);
            momentum_step(&mut model.softmax_w, &mut vel_w, &g.softmax_w, lr, mu);
            momentum_step_vec(&mut model.softmax_b, &mut vel_b, &g.softmax_b, lr, mu);
            if !cfg.head_only {
                for ((layer, vel), (gw, gb)) in model.layers.iter_mut().zip(&mut vel_enc).zip(&g.encoders) {
                    momentum_step(&mut layer.w1, &mut vel.0, gw, lr, mu);
                    momentum_step_vec(&mut layer.b1, &mut vel.1, gb, lr, mu);
                }
            }
        }
        let loss = model.finetune_loss(samples, labels);
        if !loss.is_finite() {
            return Err(EsaeError::NonFiniteLoss);
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Mat {
        Mat::from_shape_fn((n, m), |_| rng.random_range(0.05..0.95))
    }

    fn max_rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    #[test]
    fn kl_cases() {
        assert!(kl_sparsity(0.05, &[0.05, 0.05, 0.05]).abs() < 1e-15);
        let v = kl_sparsity(0.05, &[0.2]);
        let expected = 0.05 * (0.05f64 / 0.2).ln() + 0.95 * (0.95f64 / 0.8).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.0939).abs() < 1e-4);
        // clamped at the boundary instead of producing infinities
        assert!(kl_sparsity(0.05, &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn selection_orders_by_variance() {
        // column variances 5, 2, 7
        let s5 = 5.0f64.sqrt();
        let s2 = 2.0f64.sqrt();
        let s7 = 7.0f64.sqrt();
        let v = array![[s5, s2, s7], [-s5, -s2, -s7], [0.0, 0.0, 0.0]];
        let g = build_selection(&v, 2).unwrap();
        assert_eq!(g.selected, vec![2, 0]);
        let tied = array![[1.0, 2.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let var = linalg::column_variances(&tied).unwrap();
        assert_eq!(var[0], var[1]);
        assert_eq!(build_selection(&tied, 2).unwrap().selected, vec![0, 1]);
        assert!(matches!(
            build_selection(&tied, 4),
            Err(EsaeError::TooFewFeatures { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn full_width_selection_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_unit(&mut rng, 10, 4);
        let g = build_selection(&v, 4).unwrap().matrix();
        for i in 0..4 {
            assert_eq!(g.row(i).sum(), 1.0);
            assert_eq!(g.column(i).sum(), 1.0);
        }
    }

    #[test]
    fn embed_gathers_columns() {
        let g = Selection { rows: 3, selected: vec![2, 0] };
        assert_eq!(embed(&array![[9.0, 4.0, 7.0]], &g).unwrap(), array![[7.0, 9.0]]);
        let ident = Selection { rows: 3, selected: vec![0, 1] };
        assert_eq!(embed(&array![[9.0, 4.0, 7.0]], &ident).unwrap(), array![[9.0, 4.0]]);
        assert!(embed(&array![[1.0, 2.0]], &g).is_err());
        // gather equals multiplication by the binary matrix
        let v = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(embed(&v, &g).unwrap(), v.dot(&g.matrix()));
    }

    #[test]
    fn zero_epochs_reports_initial_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_unit(&mut rng, 6, 3);
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            sparsity: SparsityParams { lambda: 0.0, beta: 0.0, rho: 0.05 },
            ..TrainConfig::default()
        };
        let (layer, losses) = pretrain_layer(&x, 3, &cfg, 5).unwrap();
        assert_eq!(losses.len(), 1);
        let r = layer.decode(&layer.encode(&x));
        let recon = linalg::frobenius_sq(&(&r - &x)) / 6.0;
        assert_eq!(losses[0], recon);
        let (again, _) = pretrain_layer(&x, 3, &cfg, 5).unwrap();
        assert_eq!(again, layer);
    }

    #[test]
    fn pretrain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_unit(&mut rng, 4, 3);
        let layer = EncoderLayer::glorot(3, 2, &mut rng);
        let params = SparsityParams { lambda: 0.01, beta: 0.5, rho: 0.1 };
        let (_, g) = layer_loss_and_grad(&layer, &x, &params);
        let h = 1e-5;
        let check = |perturb: &dyn Fn(&mut EncoderLayer, f64), analytic: f64| {
            let mut plus = layer.clone();
            perturb(&mut plus, h);
            let mut minus = layer.clone();
            perturb(&mut minus, -h);
            let numeric = (layer_loss(&plus, &x, &params) - layer_loss(&minus, &x, &params)) / (2.0 * h);
            assert!(max_rel_err(analytic, numeric) < 1e-4, "{analytic} vs {numeric}");
        };
        for i in 0..3 {
            for j in 0..2 {
                check(&|l, d| l.w1[[i, j]] += d, g.w1[[i, j]]);
                check(&|l, d| l.w2[[j, i]] += d, g.w2[[j, i]]);
            }
        }
        for j in 0..2 {
            check(&|l, d| l.b1[j] += d, g.b1[j]);
        }
        for i in 0..3 {
            check(&|l, d| l.b2[i] += d, g.b2[i]);
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_unit(&mut rng, 8, 4);
        let (_, losses) = pretrain_layer(&x, 3, &TrainConfig::default(), 11).unwrap();
        assert_eq!(losses.len(), 201);
        assert!(losses[200] < losses[0]);
    }

    fn two_class_data(rng: &mut ChaCha8Rng, n: usize, width: usize) -> (Mat, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Mat::from_shape_fn((n, width), |(i, j)| {
            let shift = if (labels[i] + j) % 2 == 0 { 0.6 } else { 0.1 };
            shift + rng.random_range(0.0..0.3)
        });
        (x, labels)
    }

    #[test]
    fn finetune_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = two_class_data(&mut rng, 6, 4);
        for stacking in [Stacking::Embedded, Stacking::Plain] {
            let cfg = TrainConfig {
                hidden_widths: vec![5, 3, 3],
                pretrain_epochs: 5,
                finetune_epochs: 2,
                stacking,
                sparsity: SparsityParams { lambda: 0.01, ..SparsityParams::default() },
                ..TrainConfig::default()
            };
            let (mut model, _) = train(&x, &y, 2, &cfg).unwrap();
            if stacking == Stacking::Embedded {
                // route hidden units into the next encoders so the scatter is exercised
                model.selections = vec![
                    Selection { rows: 9, selected: vec![4, 1, 8, 6] },
                    Selection { rows: 7, selected: vec![6, 0, 4, 5] },
                ];
            }
            let (_, g) = model.finetune_loss_and_grad(&x, &y);
            let h = 1e-5;
            let fd = |edit: &dyn Fn(&mut EsaeModel, f64)| {
                let mut p = model.clone();
                edit(&mut p, h);
                let mut m = model.clone();
                edit(&mut m, -h);
                (p.finetune_loss(&x, &y) - m.finetune_loss(&x, &y)) / (2.0 * h)
            };
            for k in 0..model.depth() {
                let (rows, cols) = model.layers[k].w1.dim();
                for i in 0..rows {
                    for j in 0..cols {
                        let num = fd(&|m, d| m.layers[k].w1[[i, j]] += d);
                        assert!(max_rel_err(g.encoders[k].0[[i, j]], num) < 1e-4);
                    }
                }
                for j in 0..cols {
                    let num = fd(&|m, d| m.layers[k].b1[j] += d);
                    assert!(max_rel_err(g.encoders[k].1[j], num) < 1e-4);
                }
            }
            for ((i, j), &a) in g.softmax_w.indexed_iter() {
                let num = fd(&|m, d| m.softmax_w[[i, j]] += d);
                assert!(max_rel_err(a, num) < 1e-4);
            }
        }
    }

    #[test]
    fn tiny_dataset_is_memorised() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = two_class_data(&mut rng, 12, 6);
        let cfg = TrainConfig {
            hidden_widths: vec![6, 4, 3],
            finetune_epochs: 2000,
            seed: 3,
            ..TrainConfig::default()
        };
        let (model, trace) = train(&x, &y, 2, &cfg).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        let correct = (0..12)
            .filter(|&i| (probs[[i, 1]] > probs[[i, 0]]) as usize == y[i])
            .count();
        assert_eq!(correct, 12);
        assert_eq!(model.deep_width(), 3);
        assert_eq!(trace.train_features, model.extract(&x).unwrap());
        let (again, _) = train(&x, &y, 2, &cfg).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn embedded_layers_consume_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, y) = two_class_data(&mut rng, 10, 4);
        let cfg = TrainConfig {
            hidden_widths: vec![6, 5, 3],
            pretrain_epochs: 3,
            finetune_epochs: 3,
            ..TrainConfig::default()
        };
        let (model, _) = train(&x, &y, 2, &cfg).unwrap();
        assert_eq!(model.selections.len(), 2);
        for layer in &model.layers {
            assert_eq!(layer.input_dim(), 4);
        }
        let deep = model.extract(&x).unwrap();
        assert!(deep.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(model.extract(&Mat::zeros((2, 3))).is_err());
    }

    #[test]
    fn single_layer_extract_is_one_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, y) = two_class_data(&mut rng, 8, 4);
        let cfg = TrainConfig {
            hidden_widths: vec![3],
            pretrain_epochs: 4,
            finetune_epochs: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train(&x, &y, 2, &cfg).unwrap();
        let deep = model.extract(&x).unwrap();
        let l = &model.layers[0];
        for i in 0..8 {
            for j in 0..3 {
                let mut z = l.b1[j];
                for k in 0..4 {
                    z += l.w1[[k, j]] * x[[i, k]];
                }
                assert!((deep[[i, j]] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_width_rule() {
        assert_eq!(default_widths(13), vec![20, 13, 7]);
        assert_eq!(default_widths(4), vec![6, 4, 4]);
        assert_eq!(default_widths(1), vec![2, 2, 4]);
    }
}

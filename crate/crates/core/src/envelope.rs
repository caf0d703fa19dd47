//! Envelope sample spaces.
//!
//! Three labelled sample layers are built from the scaled training data:
//!
//! * `OS`: every sample concatenated with its nearest same-class neighbour,
//!   giving `n` rows of width `2d`.
//! * `PS`: per-class k-means centres of `OS` (`u` rows).
//! * `SS`: per-class k-means centres of `PS` (`e` rows).
//!
//! The clustered layers are then mapped back onto the layer below through a
//! transfer matrix `Q` learned by minimising a global fit term, a local
//! neighbourhood term and a nuclear-norm penalty (see [`icm_fit`]). The
//! images `PS'` and `SS'` are the layers handed to the autoencoders.

use ndarray::Axis;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, squared_distance, LinalgError, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("input has no samples")]
    EmptyInput,
    #[error("reference set is empty")]
    EmptyTrainSet,
    #[error("class {0} has no members")]
    EmptyClass(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("affinity bandwidth must be positive, got {0}")]
    DegenerateSigma(f64),
    #[error("transfer objective became non-finite")]
    NonFiniteObjective,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerTag {
    Os,
    Ps,
    Ss,
    PsAligned,
    SsAligned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeLayer {
    pub tag: LayerTag,
    pub samples: Mat,
    pub labels: Vec<usize>,
    pub source_dim: usize,
}

impl EnvelopeLayer {
    pub fn new(
        tag: LayerTag,
        samples: Mat,
        labels: Vec<usize>,
        source_dim: usize,
    ) -> Result<Self, EnvelopeError> {
        if samples.ncols() != 2 * source_dim {
            return Err(EnvelopeError::ShapeMismatch(format!(
                "envelope width {} is not 2 x {}",
                samples.ncols(),
                source_dim
            )));
        }
        if samples.nrows() != labels.len() {
            return Err(EnvelopeError::ShapeMismatch(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        Ok(Self {
            tag,
            samples,
            labels,
            source_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.samples.ncols()
    }
}

fn concat_pairs(features: &Mat, partners: &[usize], reference: &Mat) -> Mat {
    let d = features.ncols();
    let mut out = Mat::zeros((features.nrows(), 2 * d));
    for (i, &j) in partners.iter().enumerate() {
        out.row_mut(i).slice_mut(ndarray::s![..d]).assign(&features.row(i));
        out.row_mut(i).slice_mut(ndarray::s![d..]).assign(&reference.row(j));
    }
    out
}

/// Index of the candidate closest to `x`; ties go to the lowest index.
fn nearest<I: Iterator<Item = usize>>(x: &[f64], reference: &Mat, candidates: I) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for j in candidates {
        let row = reference.row(j);
        let d = squared_distance(x, row.as_slice().expect("standard layout"));
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Pairs each training sample with its nearest same-class neighbour.
pub fn spc_train(features: &Mat, labels: &[usize]) -> Result<EnvelopeLayer, EnvelopeError> {
    let n = features.nrows();
    if n == 0 {
        return Err(EnvelopeError::EmptyInput);
    }
    if labels.len() != n {
        return Err(EnvelopeError::ShapeMismatch(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let features = features.as_standard_layout().into_owned();
    let partners: Vec<usize> = (0..n)
        .map(|i| {
            let row = features.row(i);
            let x = row.as_slice().expect("standard layout");
            let same = (0..n).filter(|&j| j != i && labels[j] == labels[i]);
            nearest(x, &features, same).unwrap_or(i)
        })
        .collect();
    EnvelopeLayer::new(
        LayerTag::Os,
        concat_pairs(&features, &partners, &features),
        labels.to_vec(),
        features.ncols(),
    )
}

/// Pairs each sample with itself. Used when neighbour pairing is disabled.
pub fn self_pairs(features: &Mat, labels: &[usize]) -> Result<EnvelopeLayer, EnvelopeError> {
    if features.nrows() == 0 {
        return Err(EnvelopeError::EmptyInput);
    }
    let idx: Vec<usize> = (0..features.nrows()).collect();
    EnvelopeLayer::new(
        LayerTag::Os,
        concat_pairs(features, &idx, features),
        labels.to_vec(),
        features.ncols(),
    )
}

/// Pairs unlabelled samples with their nearest training sample of any class.
pub fn spc_infer(features: &Mat, train_features: &Mat) -> Result<Mat, EnvelopeError> {
    if train_features.nrows() == 0 {
        return Err(EnvelopeError::EmptyTrainSet);
    }
    if features.ncols() != train_features.ncols() {
        return Err(EnvelopeError::ShapeMismatch(format!(
            "query width {} vs reference width {}",
            features.ncols(),
            train_features.ncols()
        )));
    }
    let features = features.as_standard_layout().into_owned();
    let reference = train_features.as_standard_layout().into_owned();
    let partners: Vec<usize> = features
        .rows()
        .into_iter()
        .map(|row| {
            nearest(row.as_slice().expect("standard layout"), &reference, 0..reference.nrows())
                .expect("non-empty reference")
        })
        .collect();
    Ok(concat_pairs(&features, &partners, &reference))
}

/// Output of a Lloyd run on one point set.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Mat,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centre, recorded after every
    /// assignment step and every centre update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;
/// Independently initialised Lloyd runs per class; the lowest final objective wins.
pub const KMEANS_RESTARTS: usize = 10;

fn kmeans_objective(points: &Mat, centers: &Mat, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            squared_distance(
                points.row(i).as_slice().unwrap(),
                centers.row(c).as_slice().unwrap(),
            )
        })
        .sum()
}

/// Lloyd's algorithm with centres initialised from `k` distinct points drawn
/// with `rng` (kept in index order).
pub fn kmeans(points: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Result<KMeans, EnvelopeError> {
    let n = points.nrows();
    if n == 0 {
        return Err(EnvelopeError::EmptyInput);
    }
    if k == 0 || k > n {
        return Err(EnvelopeError::InvalidParameter(format!(
            "cannot place {k} centres on {n} points"
        )));
    }
    let points = points.as_standard_layout().into_owned();
    let mut init = index::sample(rng, n, k).into_vec();
    init.sort_unstable();
    let mut centers = points.select(Axis(0), &init);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for iter in 0..KMEANS_MAX_ITERS {
        iterations = iter + 1;
        let mut changed = false;
        for i in 0..n {
            let c = nearest(points.row(i).as_slice().unwrap(), &centers, 0..k).unwrap();
            if c != assignment[i] {
                assignment[i] = c;
                changed = true;
            }
        }
        if iter > 0 && !changed {
            break;
        }
        reseed_empty(&points, &mut centers, &mut assignment, k);
        trace.push(kmeans_objective(&points, &centers, &assignment));

        let mut sums = Mat::zeros((k, points.ncols()));
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &points.row(i));
            counts[c] += 1;
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
            for (old, new) in centers.row(c).iter().zip(mean.iter()) {
                movement = movement.max((old - new).abs());
            }
            centers.row_mut(c).assign(&mean);
        }
        trace.push(kmeans_objective(&points, &centers, &assignment));
        if movement < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignment,
        objective_trace: trace,
        iterations,
    })
}

impl KMeans {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Moves the point farthest from its centre into each empty cluster.
fn reseed_empty(points: &Mat, centers: &mut Mat, assignment: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far: Option<(f64, usize)> = None;
        for (i, &c) in assignment.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = squared_distance(
                points.row(i).as_slice().unwrap(),
                centers.row(c).as_slice().unwrap(),
            );
            if far.map_or(true, |(fd, _)| d > fd) {
                far = Some((d, i));
            }
        }
        let (_, i) = far.expect("k <= n guarantees a cluster with two members");
        assignment[i] = empty;
        centers.row_mut(empty).assign(&points.row(i));
    }
}

/// Per-class k-means clustering of a layer.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub layer: EnvelopeLayer,
    /// For each input sample, the row of its centre in `layer`.
    pub assignment: Vec<usize>,
    /// Lloyd objective trace of the kept run of each class, in class order.
    pub class_traces: Vec<Vec<f64>>,
}

impl Clustering {
    pub fn objective(&self, input: &EnvelopeLayer) -> f64 {
        kmeans_objective(&input.samples, &self.layer.samples, &self.assignment)
    }
}

/// Clusters every class separately with `ceil(ratio * class_size)` centres,
/// keeping the best of [`KMEANS_RESTARTS`] seeded Lloyd runs.
pub fn imc(layer: &EnvelopeLayer, ratio: f64, seed: u64) -> Result<Clustering, EnvelopeError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(EnvelopeError::InvalidParameter(format!(
            "cluster ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if layer.is_empty() {
        return Err(EnvelopeError::EmptyInput);
    }
    let class_count = layer.labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = layer.width();
    let mut center_rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut assignment = vec![0; layer.len()];
    let mut class_traces = Vec::new();

    for class in 0..class_count {
        let members: Vec<usize> = (0..layer.len()).filter(|&i| layer.labels[i] == class).collect();
        if members.is_empty() {
            return Err(EnvelopeError::EmptyClass(class));
        }
        let k = ((ratio * members.len() as f64).ceil() as usize).clamp(1, members.len());
        let points = layer.samples.select(Axis(0), &members);
        let runs = if k == members.len() { 1 } else { KMEANS_RESTARTS };
        let mut km = kmeans(&points, k, &mut rng)?;
        for _ in 1..runs {
            let candidate = kmeans(&points, k, &mut rng)?;
            if candidate.final_objective() < km.final_objective() {
                km = candidate;
            }
        }
        let offset = center_rows.len();
        for (m, &c) in members.iter().zip(&km.assignment) {
            assignment[*m] = offset + c;
        }
        for row in km.centers.rows() {
            center_rows.push(row.to_vec());
            labels.push(class);
        }
        class_traces.push(km.objective_trace);
    }
    let flat: Vec<f64> = center_rows.into_iter().flatten().collect();
    let samples = Mat::from_shape_vec((labels.len(), width), flat).expect("row widths agree");
    let tag = match layer.tag {
        LayerTag::Os | LayerTag::PsAligned => LayerTag::Ps,
        _ => LayerTag::Ss,
    };
    Ok(Clustering {
        layer: EnvelopeLayer::new(tag, samples, labels, layer.source_dim)?,
        assignment,
        class_traces,
    })
}

/// Row-normalised heat-kernel weights over each sample's `k_w` nearest
/// neighbours in the target layer.
#[derive(Debug, Clone)]
pub struct AffinityWeights {
    pub w: Mat,
    pub k_w: usize,
}

pub fn build_affinity(
    target: &EnvelopeLayer,
    k_w: usize,
    sigma: f64,
) -> Result<AffinityWeights, EnvelopeError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(EnvelopeError::DegenerateSigma(sigma));
    }
    let n = target.len();
    if k_w == 0 || k_w >= n {
        return Err(EnvelopeError::InvalidParameter(format!(
            "neighbour count {k_w} must lie in [1, {})",
            n
        )));
    }
    let samples = target.samples.as_standard_layout().into_owned();
    let mut w = Mat::zeros((n, n));
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        let xi = samples.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let d = squared_distance(xi.as_slice().unwrap(), samples.row(j).as_slice().unwrap());
            dists.push((d, j));
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut total = 0.0;
        for &(d, j) in dists.iter().take(k_w) {
            let v = (-d / (2.0 * sigma * sigma)).exp();
            w[[i, j]] = v;
            total += v;
        }
        if total > 0.0 {
            w.row_mut(i).mapv_inplace(|v| v / total);
        }
    }
    Ok(AffinityWeights { w, k_w })
}

/// Median Euclidean distance over all unordered sample pairs.
pub fn median_pairwise_distance(samples: &Mat) -> f64 {
    let n = samples.nrows();
    let samples = samples.as_standard_layout();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(
                squared_distance(samples.row(i).as_slice().unwrap(), samples.row(j).as_slice().unwrap())
                    .sqrt(),
            );
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcmCoefficients {
    pub gdd: f64,
    pub ldd: f64,
    pub nuclear: f64,
}

impl Default for IcmCoefficients {
    fn default() -> Self {
        Self {
            gdd: 1.0,
            ldd: 0.1,
            nuclear: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcmSettings {
    pub coefficients: IcmCoefficients,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for IcmSettings {
    fn default() -> Self {
        Self {
            coefficients: IcmCoefficients::default(),
            max_iters: 1000,
            tolerance: 1e-5,
        }
    }
}

/// The fitted transfer matrix and solver bookkeeping.
#[derive(Debug, Clone)]
pub struct TransferSolverState {
    /// `u x n`: column `j` mixes source samples into the image of target `j`.
    pub q: Mat,
    pub step_size: f64,
    pub coefficients: IcmCoefficients,
    /// Objective after initialisation and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub iterations: usize,
}

/// Value of each objective term at `q`; `p` and `o` hold samples as columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcmTerms {
    pub gdd: f64,
    pub ldd: f64,
    pub nuclear: f64,
}

impl IcmTerms {
    pub fn total(&self, c: &IcmCoefficients) -> f64 {
        c.gdd * self.gdd + c.ldd * self.ldd + c.nuclear * self.nuclear
    }
}

/// Global term `(1/n)||PQ - O||_F^2` and local term
/// `sum_ij W_ij ||(PQ)_i - O_j||^2` (columns are samples).
fn smooth_terms(p: &Mat, o: &Mat, w: &Mat, q: &Mat) -> (f64, f64, Mat) {
    let n = o.ncols() as f64;
    let g = p.dot(q);
    let gdd = linalg::frobenius_sq(&(&g - o)) / n;
    let mut ldd = 0.0;
    for ((i, j), &wij) in w.indexed_iter() {
        if wij != 0.0 {
            let diff = &g.column(i) - &o.column(j);
            ldd += wij * diff.dot(&diff);
        }
    }
    (gdd, ldd, g)
}

pub fn icm_terms(p: &Mat, o: &Mat, w: &Mat, q: &Mat) -> Result<IcmTerms, EnvelopeError> {
    let (gdd, ldd, _) = smooth_terms(p, o, w, q);
    Ok(IcmTerms {
        gdd,
        ldd,
        nuclear: linalg::nuclear_norm(q)?,
    })
}

pub fn icm_objective(
    p: &Mat,
    o: &Mat,
    w: &Mat,
    q: &Mat,
    coefficients: &IcmCoefficients,
) -> Result<f64, EnvelopeError> {
    Ok(icm_terms(p, o, w, q)?.total(coefficients))
}

/// Gradient of the smooth part with respect to `Q`.
fn smooth_gradient(p: &Mat, o: &Mat, w: &Mat, g: &Mat, c: &IcmCoefficients) -> Mat {
    let n = o.ncols() as f64;
    let mut dg = (g - o) * (2.0 * c.gdd / n);
    if c.ldd != 0.0 {
        let row_sums = w.sum_axis(Axis(1));
        let pulled = o.dot(&w.t());
        let mut local = g * &row_sums.insert_axis(Axis(0));
        local -= &pulled;
        dg.scaled_add(2.0 * c.ldd, &local);
    }
    p.t().dot(&dg)
}

/// Accelerated proximal gradient on the transfer objective, matrix form.
///
/// `p` is `2d x u` (source samples as columns), `o` is `2d x n`, `w` is
/// `n x n` and `q0` is `u x n`.
pub fn icm_solve(
    p: &Mat,
    o: &Mat,
    w: &Mat,
    q0: Mat,
    settings: &IcmSettings,
) -> Result<TransferSolverState, EnvelopeError> {
    let (dim, u) = p.dim();
    let n = o.ncols();
    if o.nrows() != dim || q0.dim() != (u, n) || w.dim() != (n, n) {
        return Err(EnvelopeError::ShapeMismatch(format!(
            "P {:?}, O {:?}, W {:?}, Q0 {:?}",
            p.dim(),
            o.dim(),
            w.dim(),
            q0.dim()
        )));
    }
    let c = settings.coefficients;
    if c.gdd < 0.0 || c.ldd < 0.0 || c.nuclear < 0.0 {
        return Err(EnvelopeError::InvalidParameter("negative ICM coefficient".into()));
    }

    let max_row_sum = w.sum_axis(Axis(1)).iter().fold(0.0f64, |a, &b| a.max(b));
    let p_norm = linalg::svd(p)?.s[0];
    let lipschitz = p_norm * p_norm * (2.0 * c.gdd / n as f64 + 2.0 * c.ldd * max_row_sum);
    let mut step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let value_at = |q: &Mat| -> Result<(f64, Mat), EnvelopeError> {
        let (gdd, ldd, g) = smooth_terms(p, o, w, q);
        let value = c.gdd * gdd + c.ldd * ldd + c.nuclear * linalg::nuclear_norm(q)?;
        if value.is_finite() {
            Ok((value, g))
        } else {
            Err(EnvelopeError::NonFiniteObjective)
        }
    };
    // Proximal step from `y`: returns the candidate and its objective.
    let prox_step = |y: &Mat, gy: &Mat, step: f64| -> Result<(Mat, f64), EnvelopeError> {
        let grad = smooth_gradient(p, o, w, gy, &c);
        let forward = y - &(&grad * step);
        let dec = linalg::svd(&forward)?;
        let tau = step * c.nuclear;
        let candidate = linalg::svt_from(&dec, tau);
        let nuclear: f64 = dec.s.iter().map(|s| (s - tau).max(0.0)).sum();
        let (cg, cl, _) = smooth_terms(p, o, w, &candidate);
        let value = c.gdd * cg + c.ldd * cl + c.nuclear * nuclear;
        if value.is_finite() {
            Ok((candidate, value))
        } else {
            Err(EnvelopeError::NonFiniteObjective)
        }
    };

    let mut q = q0;
    let (mut current, mut g) = value_at(&q)?;
    let mut previous = q.clone();
    let mut momentum = 1.0f64;
    let mut trace = vec![current];
    let mut iterations = 0;

    // Accelerated proximal gradient with function-value restart: the step is
    // taken from the extrapolated point; if that would raise the objective the
    // momentum is dropped and the plain step from `q` is tried, and only if
    // that also raises it is the step halved.
    'outer: for _ in 0..settings.max_iters {
        iterations += 1;
        if current == 0.0 {
            break;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        let mut extrapolate = beta > 0.0;
        let mut restarted = false;
        let mut accepted = None;
        for _ in 0..60 {
            let (candidate, value) = if extrapolate {
                let y = &q + &((&q - &previous) * beta);
                let (_, _, gy) = smooth_terms(p, o, w, &y);
                prox_step(&y, &gy, step)?
            } else {
                prox_step(&q, &g, step)?
            };
            if value <= current {
                accepted = Some((candidate, value));
                break;
            }
            if extrapolate {
                extrapolate = false;
                restarted = true;
            } else {
                step *= 0.5;
            }
        }
        let Some((next, value)) = accepted else {
            break 'outer;
        };
        momentum = if restarted { 1.0 } else { next_momentum };
        let decrease = (current - value) / current.abs().max(f64::MIN_POSITIVE);
        previous = std::mem::replace(&mut q, next);
        g = smooth_terms(p, o, w, &q).2;
        current = value;
        trace.push(value);
        if decrease < settings.tolerance {
            break;
        }
    }
    Ok(TransferSolverState {
        q,
        step_size: step,
        coefficients: c,
        objective_trace: trace,
        max_iters: settings.max_iters,
        tolerance: settings.tolerance,
        iterations,
    })
}

/// Indicator initialisation: `Q[c(j), j] = 1`.
pub fn assignment_indicator(assignment: &[usize], u: usize) -> Result<Mat, EnvelopeError> {
    let mut q = Mat::zeros((u, assignment.len()));
    for (j, &c) in assignment.iter().enumerate() {
        if c >= u {
            return Err(EnvelopeError::ShapeMismatch(format!(
                "assignment {c} out of range for {u} centres"
            )));
        }
        q[[c, j]] = 1.0;
    }
    Ok(q)
}

/// Learns `Q` so that the source layer, mixed by `Q`, matches `target`.
/// `assignment[j]` is the source row that target sample `j` was clustered to.
pub fn icm_fit(
    source: &EnvelopeLayer,
    target: &EnvelopeLayer,
    weights: &AffinityWeights,
    assignment: &[usize],
    settings: &IcmSettings,
) -> Result<TransferSolverState, EnvelopeError> {
    if source.width() != target.width() {
        return Err(EnvelopeError::ShapeMismatch(format!(
            "source width {} vs target width {}",
            source.width(),
            target.width()
        )));
    }
    if assignment.len() != target.len() {
        return Err(EnvelopeError::ShapeMismatch(format!(
            "{} assignments for {} target samples",
            assignment.len(),
            target.len()
        )));
    }
    let p = source.samples.t().to_owned();
    let o = target.samples.t().to_owned();
    let q0 = assignment_indicator(assignment, source.len())?;
    icm_solve(&p, &o, &weights.w, q0, settings)
}

/// The generated layer `(P Q)^T`, labelled like the target layer.
pub fn icm_generate(
    state: &TransferSolverState,
    source: &EnvelopeLayer,
    target: &EnvelopeLayer,
) -> Result<EnvelopeLayer, EnvelopeError> {
    if state.q.dim() != (source.len(), target.len()) || source.width() != target.width() {
        return Err(EnvelopeError::ShapeMismatch(format!(
            "Q is {:?} but layers give ({}, {})",
            state.q.dim(),
            source.len(),
            target.len()
        )));
    }
    let samples = state.q.t().dot(&source.samples);
    let tag = match source.tag {
        LayerTag::Ps => LayerTag::PsAligned,
        _ => LayerTag::SsAligned,
    };
    EnvelopeLayer::new(tag, samples, target.labels.clone(), target.source_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvelopeConfig {
    pub cluster_ratio: f64,
    pub affinity_neighbors: usize,
    /// Heat-kernel bandwidth; `None` uses the median pairwise distance.
    pub affinity_sigma: Option<f64>,
    pub icm: IcmSettings,
    /// Pair samples with their nearest neighbour (otherwise with themselves).
    pub pair_neighbors: bool,
    /// Replace the clustered layers by their aligned images.
    pub align: bool,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            cluster_ratio: 0.5,
            affinity_neighbors: 5,
            affinity_sigma: None,
            icm: IcmSettings::default(),
            pair_neighbors: true,
            align: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvelopeLayers {
    pub os: EnvelopeLayer,
    pub ps: EnvelopeLayer,
    pub ss: EnvelopeLayer,
    /// `PS'` (or raw `PS` when alignment is disabled).
    pub ps_aligned: EnvelopeLayer,
    /// `SS'` (or raw `SS` when alignment is disabled).
    pub ss_aligned: EnvelopeLayer,
    pub ps_solver: Option<TransferSolverState>,
    pub ss_solver: Option<TransferSolverState>,
}

impl EnvelopeLayers {
    /// The three layers the autoencoders are trained on.
    pub fn training_layers(&self) -> [&EnvelopeLayer; 3] {
        [&self.os, &self.ps_aligned, &self.ss_aligned]
    }
}

fn align(
    source: &EnvelopeLayer,
    target: &EnvelopeLayer,
    assignment: &[usize],
    cfg: &EnvelopeConfig,
) -> Result<(EnvelopeLayer, TransferSolverState), EnvelopeError> {
    let k_w = cfg.affinity_neighbors.min(target.len().saturating_sub(1));
    let sigma = match cfg.affinity_sigma {
        Some(s) => s,
        None => {
            let m = median_pairwise_distance(&target.samples);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let weights = if k_w == 0 {
        AffinityWeights {
            w: Mat::zeros((target.len(), target.len())),
            k_w: 0,
        }
    } else {
        build_affinity(target, k_w, sigma)?
    };
    let state = icm_fit(source, target, &weights, assignment, &cfg.icm)?;
    let generated = icm_generate(&state, source, target)?;
    Ok((generated, state))
}

/// `OS -> PS -> SS` by clustering, then `PS' = align(PS, OS)` and
/// `SS' = align(SS, PS)`.
pub fn build_layers(
    features: &Mat,
    labels: &[usize],
    cfg: &EnvelopeConfig,
    seed: u64,
) -> Result<EnvelopeLayers, EnvelopeError> {
    let os = if cfg.pair_neighbors {
        spc_train(features, labels)?
    } else {
        self_pairs(features, labels)?
    };
    let primary = imc(&os, cfg.cluster_ratio, seed)?;
    let secondary = imc(&primary.layer, cfg.cluster_ratio, seed.wrapping_add(1))?;
    let ps = primary.layer.clone();
    let ss = secondary.layer.clone();

    if !cfg.align {
        return Ok(EnvelopeLayers {
            ps_aligned: ps.clone(),
            ss_aligned: ss.clone(),
            os,
            ps,
            ss,
            ps_solver: None,
            ss_solver: None,
        });
    }
    let (ps_aligned, ps_state) = align(&ps, &os, &primary.assignment, cfg)?;
    let (ss_aligned, ss_state) = align(&ss, &ps, &secondary.assignment, cfg)?;
    Ok(EnvelopeLayers {
        os,
        ps,
        ss,
        ps_aligned,
        ss_aligned,
        ps_solver: Some(ps_state),
        ss_solver: Some(ss_state),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn layer(samples: Mat, labels: Vec<usize>) -> EnvelopeLayer {
        let d = samples.ncols() / 2;
        EnvelopeLayer::new(LayerTag::Os, samples, labels, d).unwrap()
    }

    #[test]
    fn spc_pairs_nearest_same_class() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [0.5, 0.0]];
        let os = spc_train(&x, &[0, 0, 0, 1]).unwrap();
        assert_eq!(os.samples.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(os.samples.row(2).to_vec(), vec![5.0, 0.0, 1.0, 0.0]);
        // single-member class pairs with itself
        assert_eq!(os.samples.row(3).to_vec(), vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(os.width(), 4);
    }

    #[test]
    fn spc_single_member_and_ties() {
        let os = spc_train(&array![[2.0, 3.0], [9.0, 9.0]], &[0, 1]).unwrap();
        assert_eq!(os.samples.row(0).to_vec(), vec![2.0, 3.0, 2.0, 3.0]);
        let dup = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let os = spc_train(&dup, &[0, 0, 0]).unwrap();
        // sample 2 is tied between 0 and 1; lowest index wins
        assert_eq!(os.samples.row(2).to_vec(), vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(spc_train(&Mat::zeros((0, 2)), &[]).unwrap_err(), EnvelopeError::EmptyInput);
    }

    #[test]
    fn spc_infer_rules() {
        let train = array![[1.0, 0.0], [9.0, 9.0]];
        let out = spc_infer(&array![[0.0, 0.0], [9.0, 9.0]], &train).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(out.row(1).to_vec(), vec![9.0, 9.0, 9.0, 9.0]);
        let tie = spc_infer(&array![[0.0, 0.0]], &array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(tie.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            spc_infer(&array![[0.0, 0.0]], &Mat::zeros((0, 2))).unwrap_err(),
            EnvelopeError::EmptyTrainSet
        );
    }

    #[test]
    fn imc_full_ratio_is_identity() {
        let os = layer(array![[0.0, 1.0], [3.0, 4.0], [7.0, 7.0], [2.0, 2.0]], vec![0, 0, 1, 1]);
        let c = imc(&os, 1.0, 42).unwrap();
        assert_eq!(c.layer.samples, os.samples);
        assert_eq!(c.layer.labels, os.labels);
        assert_eq!(c.objective(&os), 0.0);
        assert_eq!(c.layer.tag, LayerTag::Ps);
    }

    #[test]
    fn imc_two_centres_on_separated_pairs() {
        // 1-D values {0, 1, 10, 11}, each paired with itself
        let os = self_pairs(&array![[0.0], [1.0], [10.0], [11.0]], &[0, 0, 0, 0]).unwrap();
        for seed in 0..10 {
            let c = imc(&os, 0.5, seed).unwrap();
            let mut centers: Vec<Vec<f64>> = c.layer.samples.rows().into_iter().map(|r| r.to_vec()).collect();
            centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(centers, vec![vec![0.5, 0.5], vec![10.5, 10.5]]);
        }
    }

    #[test]
    fn imc_single_centre_is_class_mean() {
        let os = layer(array![[0.0, 0.0], [2.0, 4.0], [4.0, 2.0], [9.0, 9.0]], vec![0, 0, 0, 1]);
        let c = imc(&os, 0.3, 1).unwrap();
        assert_eq!(c.layer.len(), 2);
        assert_eq!(c.layer.samples.row(0).to_vec(), vec![2.0, 2.0]);
        assert_eq!(c.layer.samples.row(1).to_vec(), vec![9.0, 9.0]);
        assert_eq!(c.assignment, vec![0, 0, 0, 1]);
    }

    #[test]
    fn imc_rejects_empty_class_and_bad_ratio() {
        let os = layer(array![[0.0, 0.0], [1.0, 1.0]], vec![0, 2]);
        assert_eq!(imc(&os, 0.5, 0).unwrap_err(), EnvelopeError::EmptyClass(1));
        assert!(imc(&os, 0.0, 0).is_err());
    }

    #[test]
    fn lloyd_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pts = Mat::from_shape_fn((30, 3), |_| rng.random_range(0.0..1.0));
            let km = kmeans(&pts, 5, &mut rng).unwrap();
            for w in km.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            // fixed point: every point sits with its nearest centre
            for (i, &c) in km.assignment.iter().enumerate() {
                let own = squared_distance(pts.row(i).as_slice().unwrap(), km.centers.row(c).as_slice().unwrap());
                for k in 0..5 {
                    let other = squared_distance(pts.row(i).as_slice().unwrap(), km.centers.row(k).as_slice().unwrap());
                    assert!(own <= other + 1e-9);
                }
            }
        }
    }

    #[test]
    fn duplicate_points_trigger_reseed() {
        let pts = array![[1.0], [1.0], [1.0], [5.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let km = kmeans(&pts, 3, &mut rng).unwrap();
        let used: std::collections::BTreeSet<usize> = km.assignment.iter().copied().collect();
        assert_eq!(used.len(), 3);
        assert_eq!(*km.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn affinity_rows() {
        let os = layer(array![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], vec![0, 0, 0]);
        let a = build_affinity(&os, 1, 1.0).unwrap();
        for row in a.w.rows() {
            assert_eq!(row.iter().filter(|v| **v > 0.0).count(), 1);
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.w[[2, 1]], 1.0);

        let same = layer(Mat::ones((4, 2)), vec![0; 4]);
        let a = build_affinity(&same, 2, 0.5).unwrap();
        for row in a.w.rows() {
            let nz: Vec<f64> = row.iter().copied().filter(|v| *v > 0.0).collect();
            assert_eq!(nz, vec![0.5, 0.5]);
        }
        assert_eq!(build_affinity(&same, 2, 0.0).unwrap_err(), EnvelopeError::DegenerateSigma(0.0));
        assert!(build_affinity(&same, 4, 1.0).is_err());
    }

    #[test]
    fn affinity_row_sums_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let os = layer(Mat::from_shape_fn((15, 4), |_| rng.random_range(-3.0..3.0)), vec![0; 15]);
            let a = build_affinity(&os, 4, 0.2).unwrap();
            for (i, row) in a.w.rows().into_iter().enumerate() {
                let s = row.sum();
                assert!(s.abs() < 1e-12 || (s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
                assert_eq!(row[i], 0.0);
            }
        }
    }

    #[test]
    fn median_distance() {
        assert_eq!(median_pairwise_distance(&array![[0.0], [1.0], [3.0]]), 2.0);
        assert_eq!(median_pairwise_distance(&array![[0.0]]), 0.0);
    }

    fn random_instance(rng: &mut ChaCha8Rng, dim: usize, u: usize, n: usize) -> (Mat, Mat, Mat, Mat) {
        let p = Mat::from_shape_fn((dim, u), |_| rng.random_range(0.0..1.0));
        let o = Mat::from_shape_fn((dim, n), |_| rng.random_range(0.0..1.0));
        let target = layer(o.t().to_owned(), vec![0; n]);
        let w = build_affinity(&target, (n - 1).min(3), 0.5).unwrap().w;
        let assignment: Vec<usize> = (0..n).map(|j| j % u).collect();
        let q0 = assignment_indicator(&assignment, u).unwrap();
        (p, o, w, q0)
    }

    #[test]
    fn exact_match_reaches_zero_global_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = Mat::from_shape_fn((4, 6), |_| rng.random_range(0.0..1.0));
        let w = Mat::zeros((6, 6));
        let assignment = vec![1, 0, 3, 2, 5, 4];
        let q0 = assignment_indicator(&assignment, 6).unwrap();
        let settings = IcmSettings {
            coefficients: IcmCoefficients { gdd: 1.0, ldd: 0.0, nuclear: 0.0 },
            max_iters: 20_000,
            tolerance: 1e-14,
        };
        let start = icm_terms(&o, &o, &w, &q0).unwrap().gdd;
        let state = icm_solve(&o, &o, &w, q0, &settings).unwrap();
        let end = icm_terms(&o, &o, &w, &state.q).unwrap().gdd;
        assert!(end <= start);
        assert!(end <= 1e-6, "gdd {end}");
    }

    #[test]
    fn pure_shrinkage_decreases_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, o, w, _) = random_instance(&mut rng, 2, 3, 4);
        let q0 = Mat::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let settings = IcmSettings {
            coefficients: IcmCoefficients { gdd: 0.0, ldd: 0.0, nuclear: 0.5 },
            max_iters: 1000,
            tolerance: 0.0,
        };
        let state = icm_solve(&p, &o, &w, q0, &settings).unwrap();
        for win in state.objective_trace.windows(2) {
            assert!(win[1] < win[0]);
        }
        assert!(*state.objective_trace.last().unwrap() < 1e-12);
    }

    #[test]
    fn solver_trace_monotone_and_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (p, o, w, q0) = random_instance(&mut rng, 2, 2, 3);
        let settings = IcmSettings {
            max_iters: 20_000,
            tolerance: 1e-13,
            ..IcmSettings::default()
        };
        let c = settings.coefficients;
        let start = icm_objective(&p, &o, &w, &q0, &c).unwrap();
        let state = icm_solve(&p, &o, &w, q0, &settings).unwrap();
        for win in state.objective_trace.windows(2) {
            assert!(win[1] <= win[0]);
        }
        let fin = icm_objective(&p, &o, &w, &state.q, &c).unwrap();
        assert!(fin <= start);
        assert!((fin - state.objective_trace.last().unwrap()).abs() < 1e-9);
        let mut best = f64::INFINITY;
        for _ in 0..100_000 {
            let q = Mat::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
            best = best.min(icm_objective(&p, &o, &w, &q, &c).unwrap());
        }
        assert!(fin <= best, "solver {fin} vs random {best}");
    }

    #[test]
    fn indicator_generation_reproduces_centres() {
        let os = layer(array![[0.0, 0.0], [1.0, 1.0], [10.0, 10.0], [11.0, 11.0]], vec![0, 0, 1, 1]);
        let clustering = imc(&os, 0.5, 3).unwrap();
        let q = assignment_indicator(&clustering.assignment, clustering.layer.len()).unwrap();
        let state = TransferSolverState {
            q,
            step_size: 1.0,
            coefficients: IcmCoefficients::default(),
            objective_trace: vec![],
            max_iters: 0,
            tolerance: 0.0,
            iterations: 0,
        };
        let gen = icm_generate(&state, &clustering.layer, &os).unwrap();
        assert_eq!(gen.labels, os.labels);
        assert_eq!(gen.tag, LayerTag::PsAligned);
        for (j, &c) in clustering.assignment.iter().enumerate() {
            assert_eq!(gen.samples.row(j), clustering.layer.samples.row(c));
        }
        assert!(icm_generate(&state, &os, &os).is_err());
    }

    fn blobs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Mat, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Mat::from_shape_fn((n, d), |(i, _)| labels[i] as f64 * 0.5 + rng.random_range(0.0..0.4));
        (x, labels)
    }

    #[test]
    fn build_layers_shapes_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = blobs(&mut rng, 24, 3);
        let layers = build_layers(&x, &y, &EnvelopeConfig::default(), 9).unwrap();
        for l in layers.training_layers() {
            assert_eq!(l.width(), 6);
        }
        assert_eq!(layers.ps_aligned.labels, layers.os.labels);
        assert_eq!(layers.ss_aligned.labels, layers.ps.labels);
        assert_eq!(layers.ps.len(), 12);
        assert_eq!(layers.ss.len(), 6);
        for s in [&layers.ps_solver, &layers.ss_solver] {
            let trace = &s.as_ref().unwrap().objective_trace;
            for w in trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn full_ratio_alignment_recovers_os() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = blobs(&mut rng, 12, 2);
        let mut cfg = EnvelopeConfig {
            cluster_ratio: 1.0,
            ..EnvelopeConfig::default()
        };
        cfg.icm.coefficients = IcmCoefficients { gdd: 1.0, ldd: 0.0, nuclear: 0.0 };
        let layers = build_layers(&x, &y, &cfg, 1).unwrap();
        // the ratio-1 clustering regroups rows by class; compare as sets
        let mut a: Vec<Vec<f64>> = layers.ps_aligned.samples.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut b: Vec<Vec<f64>> = layers.os.samples.rows().into_iter().map(|r| r.to_vec()).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.iter().zip(rb) {
                assert!((va - vb).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn disabled_alignment_returns_raw_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = blobs(&mut rng, 12, 2);
        let cfg = EnvelopeConfig {
            align: false,
            pair_neighbors: false,
            ..EnvelopeConfig::default()
        };
        let layers = build_layers(&x, &y, &cfg, 1).unwrap();
        assert_eq!(layers.ps_aligned, layers.ps);
        assert!(layers.ps_solver.is_none());
        assert_eq!(layers.os.samples.row(0).to_vec()[..2], layers.os.samples.row(0).to_vec()[2..]);
    }
}

//! Repeated train/validate/test runs over a CSV dataset, ablation switches,
//! the plain autoencoder baseline, report emission and width sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{fit_predictor, score, ClassifyError, Prediction, SvmConfig};
use crate::dataset::{encode, load_csv, stratified_split, Dataset, DatasetError, Scaler, SplitIndices};
use crate::ensemble::{mv_predict, simplex_grid, wf_fit, wf_predict, EnsembleError, FusionMode};
use crate::envelope::{build_layers, spc_infer, EnvelopeConfig, EnvelopeError, EnvelopeLayer};
use crate::esae::{self, default_widths, EsaeError, EsaeModel, Stacking, TrainConfig};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O failure: {0}")]
    Io(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Esae(#[from] EsaeError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Pair every sample with itself instead of its nearest neighbour.
    pub no_spc: bool,
    /// Use the raw clustered layers instead of their aligned images.
    pub no_icm: bool,
    /// Stack the encoders directly, without embedding units.
    pub no_embed: bool,
    /// Drop the sparsity penalty.
    pub no_sparsity: bool,
    /// Classify with the first layer only.
    pub no_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub label: String,
    pub seed: u64,
    pub repeats: usize,
    pub envelope: EnvelopeConfig,
    pub esae: TrainConfig,
    pub retained_variance: f64,
    pub svm: SvmConfig,
    /// Classify on `[envelope pair, deep features]` rather than deep features alone.
    pub fuse_original: bool,
    /// Reported as `fused`; `None` picks literal fusion for two classes and
    /// score fusion otherwise.
    pub fusion: Option<FusionMode>,
    pub grid_step: f64,
    pub ablation: Ablation,
    /// Also train the plain stacked autoencoder on the original features.
    pub baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            label: "label".into(),
            seed: 0,
            repeats: 5,
            envelope: EnvelopeConfig::default(),
            esae: TrainConfig::default(),
            retained_variance: 0.95,
            svm: SvmConfig::default(),
            fuse_original: true,
            fusion: None,
            grid_step: 0.05,
            ablation: Ablation::default(),
            baseline: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.data.as_os_str().is_empty() {
            return bad("data path is required");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        let r = self.envelope.cluster_ratio;
        if !(r > 0.0 && r <= 1.0) {
            return bad("cluster ratio must lie in (0, 1]");
        }
        if !(self.retained_variance > 0.0 && self.retained_variance <= 1.0) {
            return bad("retained variance must lie in (0, 1]");
        }
        if !(self.svm.c > 0.0 && self.svm.eta0 > 0.0) {
            return bad("svm c and eta0 must be positive");
        }
        let c = &self.envelope.icm.coefficients;
        if c.gdd < 0.0 || c.ldd < 0.0 || c.nuclear < 0.0 {
            return bad("ICM coefficients must be non-negative");
        }
        simplex_grid(self.grid_step)?;
        Ok(())
    }

    /// Folds the ablation switches into the stage settings they control.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.ablation.no_spc {
            cfg.envelope.pair_neighbors = false;
        }
        if cfg.ablation.no_icm {
            cfg.envelope.align = false;
        }
        if cfg.ablation.no_embed {
            cfg.esae.stacking = Stacking::Plain;
        }
        if cfg.ablation.no_sparsity {
            cfg.esae.sparsity.beta = 0.0;
        }
        cfg
    }
}

/// Seed of repeat `r`: the SplitMix64 finaliser applied to
/// `seed + (r + 1) * 0x9E3779B97F4A7C15`. The map is a bijection of its
/// argument, so distinct repeats always get distinct seeds.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed.wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub path: String,
    pub n_samples: usize,
    pub n_features: usize,
    pub class_count: usize,
    pub label_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RepeatRecord {
    pub index: usize,
    pub seed: u64,
    pub split: SplitIndices,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub os: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mv: Option<f64>,
    /// Accuracy of the configured fusion (or of the first layer when the
    /// ensemble is disabled).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fused: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fusion_weights: Option<[f64; 3]>,
    /// Validation accuracy of the configured fusion.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub os: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ps: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ss: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wf: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mv: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fused: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<Stat>,
}

impl Aggregate {
    pub fn from_repeats(repeats: &[RepeatRecord]) -> Self {
        let collect = |f: fn(&RepeatRecord) -> Option<f64>| {
            let v: Vec<f64> = repeats.iter().filter_map(f).collect();
            Stat::of(&v)
        };
        Self {
            os: collect(|r| r.os),
            ps: collect(|r| r.ps),
            ss: collect(|r| r.ss),
            wf: collect(|r| r.wf),
            mv: collect(|r| r.mv),
            fused: collect(|r| r.fused),
            validation: collect(|r| r.validation),
            baseline: collect(|r| r.baseline),
        }
    }
}

/// Wall-clock seconds per stage of one repeat.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub prepare: f64,
    pub envelope: f64,
    pub esae: f64,
    pub classify: f64,
    pub fusion: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub fusion_mode: FusionMode,
    pub failed_repeats: usize,
    pub repeats: Vec<RepeatRecord>,
    pub aggregate: Aggregate,
    /// Kept out of the report file so that identical runs are byte-identical.
    #[serde(skip)]
    pub timings: Vec<StageTimings>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serialisable")
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let table = load_csv(&cfg.data, &cfg.label)?;
    Ok(encode(&table, &cfg.label)?)
}

fn pairs(features: &Mat, train: &Mat, neighbours: bool) -> Result<Mat, ExperimentError> {
    if neighbours {
        Ok(spc_infer(features, train)?)
    } else {
        Ok(ndarray::concatenate(ndarray::Axis(1), &[features.view(), features.view()])
            .expect("same row count"))
    }
}

struct Prepared {
    x_train: Mat,
    y_train: Vec<usize>,
    x_val: Mat,
    y_val: Vec<usize>,
    x_test: Mat,
    y_test: Vec<usize>,
}

fn prepare(data: &Dataset, split: &SplitIndices) -> Result<Prepared, ExperimentError> {
    let scaler = Scaler::fit(&data.features, &split.train)?;
    let x = scaler.apply(&data.features);
    let pick = |idx: &[usize]| x.select(ndarray::Axis(0), idx);
    Ok(Prepared {
        x_train: pick(&split.train),
        y_train: data.select_labels(&split.train),
        x_val: pick(&split.validation),
        y_val: data.select_labels(&split.validation),
        x_test: pick(&split.test),
        y_test: data.select_labels(&split.test),
    })
}

/// One trained layer model: autoencoder plus predictor, and its predictions on
/// the validation and test pairs.
pub struct LayerRun {
    pub model: EsaeModel,
    pub validation: Prediction,
    pub test: Prediction,
}

#[allow(clippy::too_many_arguments)]
fn run_layer(
    layer: &EnvelopeLayer,
    val_pairs: &Mat,
    test_pairs: &Mat,
    class_count: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    timings: &mut StageTimings,
) -> Result<LayerRun, ExperimentError> {
    let t = Instant::now();
    let train_cfg = TrainConfig {
        seed,
        ..cfg.esae.clone()
    };
    let (model, trace) = esae::train(&layer.samples, &layer.labels, class_count, &train_cfg)?;
    let deep_val = model.extract(val_pairs)?;
    let deep_test = model.extract(test_pairs)?;
    timings.esae += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let predictor = fit_predictor(
        &layer.samples,
        &trace.train_features,
        &layer.labels,
        class_count,
        cfg.retained_variance,
        &cfg.svm,
        cfg.fuse_original,
        seed ^ 0x5356_4d00,
    )?;
    let validation = predictor.predict(val_pairs, &deep_val)?;
    let test = predictor.predict(test_pairs, &deep_test)?;
    timings.classify += t.elapsed().as_secs_f64();
    Ok(LayerRun {
        model,
        validation,
        test,
    })
}

fn vote_labels<'a>(p: [&'a Prediction; 3]) -> [&'a [usize]; 3] {
    [&p[0].labels, &p[1].labels, &p[2].labels]
}

fn accuracy(truth: &[usize], pred: &[usize], class_count: usize) -> Result<f64, ExperimentError> {
    Ok(score(truth, pred, class_count)?.accuracy)
}

/// Plain stacked sparse autoencoder on the original features: no pairing,
/// clustering, alignment, embedding or ensemble. Uses the same hidden widths
/// as the envelope models.
fn run_baseline_repeat(
    prep: &Prepared,
    class_count: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let d = prep.x_train.ncols();
    let widths = if cfg.esae.hidden_widths.is_empty() {
        default_widths(d)
    } else {
        cfg.esae.hidden_widths.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        hidden_widths: widths,
        stacking: Stacking::Plain,
        ..cfg.esae.clone()
    };
    let (model, trace) = esae::train(&prep.x_train, &prep.y_train, class_count, &train_cfg)?;
    let predictor = fit_predictor(
        &prep.x_train,
        &trace.train_features,
        &prep.y_train,
        class_count,
        cfg.retained_variance,
        &cfg.svm,
        false,
        seed ^ 0x5356_4d00,
    )?;
    let deep = model.extract(&prep.x_test)?;
    let pred = predictor.predict(&prep.x_test, &deep)?;
    accuracy(&prep.y_test, &pred.labels, class_count)
}

#[derive(Clone, Copy)]
enum Plan {
    Full { baseline: bool },
    BaselineOnly,
}

fn run_repeat(
    data: &Dataset,
    cfg: &ExperimentConfig,
    mode: FusionMode,
    index: usize,
    plan: Plan,
    model_dir: Option<&Path>,
) -> (RepeatRecord, StageTimings) {
    let seed = repeat_seed(cfg.seed, index);
    let mut timings = StageTimings::default();
    let mut record = RepeatRecord {
        index,
        seed,
        ..RepeatRecord::default()
    };
    let result = (|| -> Result<(), ExperimentError> {
        let t = Instant::now();
        record.split = stratified_split(data, seed)?;
        let prep = prepare(data, &record.split)?;
        timings.prepare = t.elapsed().as_secs_f64();
        let c = data.class_count;

        let with_baseline = match plan {
            Plan::BaselineOnly => true,
            Plan::Full { baseline } => baseline,
        };
        if with_baseline {
            let t = Instant::now();
            record.baseline = Some(run_baseline_repeat(&prep, c, cfg, seed.wrapping_add(0xBA5E))?);
            timings.baseline = t.elapsed().as_secs_f64();
        }
        if matches!(plan, Plan::BaselineOnly) {
            return Ok(());
        }

        let t = Instant::now();
        let layers = build_layers(&prep.x_train, &prep.y_train, &cfg.envelope, seed)?;
        let neighbours = cfg.envelope.pair_neighbors;
        let val_pairs = pairs(&prep.x_val, &prep.x_train, neighbours)?;
        let test_pairs = pairs(&prep.x_test, &prep.x_train, neighbours)?;
        timings.envelope = t.elapsed().as_secs_f64();

        let training = layers.training_layers();
        let used = if cfg.ablation.no_ensemble { 1 } else { 3 };
        let mut runs = Vec::with_capacity(used);
        for (k, layer) in training.iter().take(used).enumerate() {
            let layer_seed = seed.wrapping_add(1000 * (k as u64 + 1));
            runs.push(run_layer(layer, &val_pairs, &test_pairs, c, cfg, layer_seed, &mut timings)?);
        }
        if let Some(dir) = model_dir {
            fs::create_dir_all(dir).map_err(|e| ExperimentError::Io(e.to_string()))?;
            for (run, name) in runs.iter().zip(["os", "ps", "ss"]) {
                esae::io::save(&run.model, dir.join(format!("repeat{index}_{name}")))?;
            }
        }

        let acc: Vec<f64> = runs
            .iter()
            .map(|r| accuracy(&prep.y_test, &r.test.labels, c))
            .collect::<Result<_, _>>()?;
        record.os = Some(acc[0]);
        if cfg.ablation.no_ensemble {
            record.fused = Some(acc[0]);
            record.validation = Some(accuracy(&prep.y_val, &runs[0].validation.labels, c)?);
            return Ok(());
        }
        record.ps = Some(acc[1]);
        record.ss = Some(acc[2]);

        let t = Instant::now();
        let val = [&runs[0].validation, &runs[1].validation, &runs[2].validation];
        let test = [&runs[0].test, &runs[1].test, &runs[2].test];
        let wf_mode = if mode == FusionMode::Mv {
            FusionMode::default_for(c)
        } else {
            mode
        };
        let weights = wf_fit(val, &prep.y_val, c, wf_mode, cfg.grid_step)?;
        let wf = accuracy(&prep.y_test, &wf_predict(&weights, test, c)?, c)?;
        let mv = accuracy(&prep.y_test, &mv_predict(vote_labels(test), c)?, c)?;
        record.wf = Some(wf);
        record.mv = Some(mv);
        record.fusion_weights = Some(weights.w);
        if mode == FusionMode::Mv {
            record.fused = Some(mv);
            record.validation = Some(accuracy(&prep.y_val, &mv_predict(vote_labels(val), c)?, c)?);
        } else {
            record.fused = Some(wf);
            record.validation = Some(weights.validation_correct as f64 / prep.y_val.len() as f64);
        }
        timings.fusion = t.elapsed().as_secs_f64();
        Ok(())
    })();
    if let Err(e) = result {
        record = RepeatRecord {
            index,
            seed,
            split: record.split,
            error: Some(e.to_string()),
            ..RepeatRecord::default()
        };
    }
    (record, timings)
}

fn execute(
    config: &ExperimentConfig,
    plan: Plan,
    model_dir: Option<&Path>,
) -> Result<ExperimentReport, ExperimentError> {
    let cfg = config.resolved();
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let mode = cfg.fusion.unwrap_or_else(|| FusionMode::default_for(data.class_count));
    let outcomes: Vec<(RepeatRecord, StageTimings)> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_repeat(&data, &cfg, mode, r, plan, model_dir))
        .collect();
    let (repeats, timings): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    Ok(ExperimentReport {
        dataset: DatasetSummary {
            path: cfg.data.display().to_string(),
            n_samples: data.n_samples(),
            n_features: data.n_features(),
            class_count: data.class_count,
            label_names: data.label_names.clone(),
        },
        fusion_mode: mode,
        failed_repeats: repeats.iter().filter(|r| r.error.is_some()).count(),
        aggregate: Aggregate::from_repeats(&repeats),
        repeats,
        timings,
        config: cfg,
    })
}

/// Runs the full pipeline, plus the paired baseline when `config.baseline` is set.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    execute(config, Plan::Full { baseline: config.baseline }, None)
}

/// Like [`run`], additionally saving every layer model under `model_dir`.
pub fn run_saving_models(config: &ExperimentConfig, model_dir: &Path) -> Result<ExperimentReport, ExperimentError> {
    execute(config, Plan::Full { baseline: config.baseline }, Some(model_dir))
}

/// Baseline only, on the same splits and seeds as [`run`].
pub fn run_baseline(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let cfg = ExperimentConfig {
        baseline: true,
        ..config.clone()
    };
    execute(&cfg, Plan::BaselineOnly, None)
}

/// Writes `report.json` and `timings.json` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(), ExperimentError> {
    let io = |e: std::io::Error| ExperimentError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("report.json"), report.to_json() + "\n").map_err(io)?;
    let timings = serde_json::to_string_pretty(&report.timings).expect("plain numbers");
    fs::write(dir.join("timings.json"), timings + "\n").map_err(io)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ExperimentReport, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Io(e.to_string()))
}

/// Aligned plain-text table of per-repeat and aggregate accuracies.
pub fn summary_table(report: &ExperimentReport) -> String {
    let columns: [(&str, fn(&RepeatRecord) -> Option<f64>, Option<Stat>); 7] = [
        ("OS", |r| r.os, report.aggregate.os),
        ("PS'", |r| r.ps, report.aggregate.ps),
        ("SS'", |r| r.ss, report.aggregate.ss),
        ("wf", |r| r.wf, report.aggregate.wf),
        ("mv", |r| r.mv, report.aggregate.mv),
        ("fused", |r| r.fused, report.aggregate.fused),
        ("baseline", |r| r.baseline, report.aggregate.baseline),
    ];
    let shown: Vec<_> = columns.iter().filter(|c| c.2.is_some()).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "repeat");
    for c in &shown {
        let _ = write!(out, "{:>16}", c.0);
    }
    out.push('\n');
    for r in &report.repeats {
        let _ = write!(out, "{:<8}", r.index);
        if let Some(e) = &r.error {
            let _ = writeln!(out, "  failed: {e}");
            continue;
        }
        for c in &shown {
            match (c.1)(r) {
                Some(v) => {
                    let _ = write!(out, "{:>16.4}", v);
                }
                None => {
                    let _ = write!(out, "{:>16}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<8}", "mean±std");
    for c in &shown {
        let s = c.2.expect("filtered");
        let _ = write!(out, "{:>16}", format!("{:.4}±{:.4}", s.mean, s.std));
    }
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCandidate {
    pub widths: Vec<usize>,
    pub validation: Option<Stat>,
    pub fused: Option<Stat>,
    pub failed_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub candidates: Vec<SweepCandidate>,
    /// Index of the candidate with the best mean validation accuracy; the
    /// first one wins ties.
    pub best: Option<usize>,
}

/// Runs the experiment once per width tuple and selects by validation accuracy.
pub fn sweep(config: &ExperimentConfig, widths: &[Vec<usize>]) -> Result<SweepReport, ExperimentError> {
    if widths.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one width tuple".into()));
    }
    let mut candidates = Vec::with_capacity(widths.len());
    for w in widths {
        let mut cfg = config.clone();
        cfg.esae.hidden_widths = w.clone();
        cfg.baseline = false;
        let report = run(&cfg)?;
        candidates.push(SweepCandidate {
            widths: w.clone(),
            validation: report.aggregate.validation,
            fused: report.aggregate.fused,
            failed_repeats: report.failed_repeats,
        });
    }
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(v) = c.validation else { continue };
        if best.is_none_or(|b| v.mean > candidates[b].validation.expect("set").mean) {
            best = Some(i);
        }
    }
    Ok(SweepReport { candidates, best })
}

/// Parses `"8,4;6,3"` or `"[8,4],[6,3]"` into width tuples.
pub fn parse_width_list(text: &str) -> Result<Vec<Vec<usize>>, ExperimentError> {
    let cleaned = text.replace(' ', "");
    let groups: Vec<&str> = if cleaned.contains('[') {
        cleaned
            .split(']')
            .map(|g| g.trim_start_matches(',').trim_start_matches('['))
            .filter(|g| !g.is_empty())
            .collect()
    } else {
        cleaned.split(';').filter(|g| !g.is_empty()).collect()
    };
    let parsed = groups
        .iter()
        .map(|g| {
            g.split(',')
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| ExperimentError::Config(format!("bad width {v:?} in {text:?}")))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    if parsed.is_empty() || parsed.iter().any(|g| g.is_empty()) {
        return Err(ExperimentError::Config(format!("no width tuples in {text:?}")));
    }
    Ok(parsed)
}

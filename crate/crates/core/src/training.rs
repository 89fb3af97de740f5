//! Deterministic training, evaluation and the three-variant ablation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureConfig, FeatureProvider};
use crate::model::{
    decide, forward_loss, predict_probability, Checkpoint, Dropout, InputWidths, ModelConfig,
    ModelParams,
};
use crate::optim::{clip_global_norm, AdamConfig, OptimizerState};
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::{TrajectoryMode, TrajectoryStats};
use crate::world::{read_episodes, Episode, Split};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    pub seeds: Vec<u64>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub clip_norm: f64,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-4,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            seeds: vec![0, 1, 2, 3, 4],
            patience: None,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and ≥ 0".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        Ok(())
    }

    fn total_steps(&self, train_len: usize) -> usize {
        let per_epoch = train_len.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1);
                let t = (step - self.warmup_steps) as f64 / span as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// One labelled model input.
#[derive(Clone, Debug)]
pub struct Sample {
    pub bundle: FeatureBundle,
    pub label: u8,
}

/// Feature bundles for every split plus the statistics used to build them.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub traj_stats: TrajectoryStats,
    pub widths: InputWidths,
    pub features: FeatureConfig,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds bundles for `episodes` with the given statistics.
pub fn build_samples(
    provider: &FeatureProvider,
    stats: &TrajectoryStats,
    episodes: &[&Episode],
) -> Result<Vec<Sample>> {
    episodes
        .par_iter()
        .map(|ep| {
            Ok(Sample {
                bundle: provider.bundle(ep, stats)?,
                label: ep.label,
            })
        })
        .collect()
}

/// Fits trajectory statistics on the train split and builds every bundle.
pub fn prepare(episodes: &[Episode], features: &FeatureConfig) -> Result<PreparedData> {
    let provider = FeatureProvider::new(features)?;
    let of = |s: Split| episodes.iter().filter(|e| e.split == s).collect::<Vec<_>>();
    let (train, val, test) = (of(Split::Train), of(Split::Val), of(Split::Test));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "dataset needs non-empty train and val splits (got {} train, {} val)",
            train.len(),
            val.len()
        )));
    }
    let traj_stats = TrajectoryStats::fit(train.iter().map(|e| &e.trajectory));
    Ok(PreparedData {
        train: build_samples(&provider, &traj_stats, &train)?,
        val: build_samples(&provider, &traj_stats, &val)?,
        test: build_samples(&provider, &traj_stats, &test)?,
        traj_stats,
        widths: InputWidths {
            lambda: provider.scene_width(),
            text: provider.text_width(),
        },
        features: features.clone(),
    })
}

pub fn prepare_file(path: &Path, features: &FeatureConfig) -> Result<PreparedData> {
    prepare(&read_episodes(path)?, features)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn record(&mut self, decision: u8, label: u8) {
        match (decision, label) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, _) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub loss: f64,
    /// Mean single-sample inference time, milliseconds.
    pub latency_ms: f64,
    pub probabilities: Vec<f64>,
}

/// Read-only pass over `samples`.
pub fn evaluate_samples<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[Sample],
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let timed: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let start = Instant::now();
            let p = predict_probability(params, &s.bundle)?;
            Ok((p, start.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;
    let mut confusion = Confusion::default();
    let mut loss = 0.0;
    for (s, &(p, _)) in samples.iter().zip(&timed) {
        confusion.record(decide(p, params.config.threshold), s.label);
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        loss -= if s.label == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(EvalMetrics {
        accuracy: confusion.accuracy(),
        confusion,
        loss: loss / samples.len() as f64,
        latency_ms: timed.iter().map(|t| t.1).sum::<f64>() / samples.len() as f64,
        probabilities: timed.into_iter().map(|t| t.0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train: EvalMetrics,
    pub test: Option<EvalMetrics>,
}

/// Result of one seed: the best-validation parameters and their report.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub params: ModelParams<f32>,
    pub report: RunReport,
}

fn mix_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut x =
        seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// Loss and gradients of one mini-batch; per-sample graphs are evaluated in
/// parallel and reduced in sample order, so results do not depend on the
/// thread count.
fn batch_gradients(
    params: &ModelParams<f32>,
    batch: &[&Sample],
    seed: u64,
    step: usize,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let rate = params.config.dropout;
    let per_sample: Vec<(f64, Vec<Tensor<f32>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut dropout = Dropout::new(rate, mix_seed(seed, step as u64, i as u64));
            let lg = forward_loss(params, &[&s.bundle], &[s.label], Some(&mut dropout))?;
            Ok((lg.loss_value(), lg.gradients(params)?))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut total) = iter.next().unwrap();
    for (l, grads) in iter {
        loss += l;
        for (t, g) in total.iter_mut().zip(&grads) {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    for t in &mut total {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss / batch.len() as f64, total))
}

/// Trains one seed and returns the parameters with the best validation
/// accuracy (ties keep the earlier epoch).
pub fn train_seed(
    data: &PreparedData,
    model: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunResult> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let mut params = ModelParams::<f32>::init(model, data.widths, seed)?;
    let mut opt = OptimizerState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    let total_steps = config.total_steps(data.train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut epochs = Vec::new();
    let mut best = (
        params.clone(),
        0usize,
        evaluate_samples(&params, &data.val)?.accuracy,
    );
    let mut stale = 0;
    let mut step = 0;
    'outer: for epoch in 1..=config.epochs {
        if step >= total_steps {
            break;
        }
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let lr = config.learning_rate_at(step, total_steps);
            let (loss, mut grads) = batch_gradients(&params, &batch, seed, step)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    step,
                    learning_rate: lr,
                    loss,
                });
            }
            clip_global_norm(&mut grads, config.clip_norm);
            opt.step_with_lr(params.tensors_mut(), &grads, lr)?;
            step_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let val_accuracy = evaluate_samples(&params, &data.val)?.accuracy;
        epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_accuracy > best.2 {
            best = (params.clone(), epoch, val_accuracy);
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break 'outer;
            }
        }
    }
    let (params, best_epoch, best_val_accuracy) = best;
    let train = evaluate_samples(&params, &data.train)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_samples(&params, &data.test)?)
    };
    Ok(RunResult {
        params,
        report: RunReport {
            seed,
            step_losses,
            epochs,
            best_epoch,
            best_val_accuracy,
            train,
            test,
        },
    })
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunReport>,
    /// Per-seed test accuracy (validation accuracy when there is no test split).
    pub accuracies: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunReport>) -> Self {
        let accuracies: Vec<f64> = runs
            .iter()
            .map(|r| r.test.as_ref().map_or(r.best_val_accuracy, |t| t.accuracy))
            .collect();
        let (accuracy_mean, accuracy_std) = mean_std(&accuracies);
        Self {
            runs,
            accuracies,
            accuracy_mean,
            accuracy_std,
        }
    }
}

/// All seeds of one configuration.
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub report: MetricsReport,
}

pub fn train(
    data: &PreparedData,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut checkpoints = Vec::new();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let run = train_seed(data, model, config, seed)?;
        checkpoints.push(Checkpoint {
            params: run.params,
            features: data.features.clone(),
            traj_stats: data.traj_stats.clone(),
        });
        runs.push(run.report);
    }
    Ok(TrainOutcome {
        checkpoints,
        report: MetricsReport::from_runs(runs),
    })
}

/// Evaluates a checkpoint on one split of an episode file.
pub fn evaluate(
    checkpoint: &Checkpoint,
    episodes: &[Episode],
    split: Split,
) -> Result<EvalMetrics> {
    let provider = FeatureProvider::new(&checkpoint.features)?;
    let widths = InputWidths {
        lambda: provider.scene_width(),
        text: provider.text_width(),
    };
    if widths != checkpoint.params.widths {
        return Err(Error::Config(format!(
            "feature widths {widths:?} do not match the checkpoint's {:?}",
            checkpoint.params.widths
        )));
    }
    let chosen: Vec<&Episode> = episodes.iter().filter(|e| e.split == split).collect();
    if chosen.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.name())));
    }
    let samples = build_samples(&provider, &checkpoint.traj_stats, &chosen)?;
    evaluate_samples(&checkpoint.params, &samples)
}

/// Ablation variants, in report order.
pub const VARIANTS: [(&str, TrajectoryMode); 3] = [
    ("full", TrajectoryMode::ConvPool),
    ("linear", TrajectoryMode::LinearBaseline),
    ("disabled", TrajectoryMode::Disabled),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: TrajectoryMode,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<MetricsReport>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text table, accuracy in percent as mean ± std.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>18}", "variant", "accuracy [%]");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>10.1} ± {:<5.2}",
                r.variant,
                100.0 * r.mean,
                100.0 * r.std
            );
        }
        out
    }
}

/// Trains the full, linear-baseline and trajectory-disabled variants of
/// `base` over every seed.
pub fn run_ablation(
    data: &PreparedData,
    base: &ModelConfig,
    config: &TrainConfig,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, mode) in VARIANTS {
        let mut model = base.clone();
        model.trajectory.mode = mode;
        let report = train(data, &model, config)?.report;
        rows.push(AblationRow {
            variant: name.to_string(),
            mode,
            accuracies: report.accuracies.clone(),
            mean: report.accuracy_mean,
            std: report.accuracy_std,
        });
        reports.push(report);
    }
    Ok(AblationReport {
        seeds: config.seeds.clone(),
        rows,
        reports,
    })
}

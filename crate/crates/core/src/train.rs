//! Normalization, class weighting, metrics, the training loop and
//! leave-one-subject-out evaluation.

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{FeatureVector, N_FEATURES};
use crate::ingest::Task;
use crate::nn::model::{
    argmax_rows, build_model_with, Mode, ModelConfig, ModelInput, ModelState, Variant,
    SEGMENT_INPUT_LEN,
};
use crate::nn::{weighted_cce, Adam, NnError, Tensor};
use crate::pipeline::{PreparedSegment, PreparedSubject};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `(x - mean) / std` over one window (population std); all zeros when the
/// window is constant.
pub fn zscore_segment(samples: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; samples.len()];
    }
    samples.iter().map(|x| (x - mean) / std).collect()
}

/// Per-feature standardization fitted on one set of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; N_FEATURES],
    /// Population std; zero entries are kept here and treated as 1 on use.
    pub std: [f64; N_FEATURES],
}

impl FeatureScaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self, TrainError> {
        let rows: Vec<&FeatureVector> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(TrainError::Usage("cannot fit a scaler on zero rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(&r.values) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; N_FEATURES];
        for r in &rows {
            for ((s, v), m) in std.iter_mut().zip(&r.values).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        Ok(Self { mean, std })
    }

    pub fn transform(&self, features: &FeatureVector) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for (i, o) in out.iter_mut().enumerate() {
            let s = if self.std[i] == 0.0 { 1.0 } else { self.std[i] };
            *o = (features.values[i] - self.mean[i]) / s;
        }
        out
    }
}

/// `w_i = N / (n_c * N_i)` for per-class counts `N_i`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>, TrainError> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(TrainError::Config(format!(
            "class {c} is absent from the training set"
        )));
    }
    let total: usize = counts.iter().sum();
    let nc = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (nc * n as f64))
        .collect())
}

/// Confusion matrix (rows = true class, columns = predicted) with the
/// metrics derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub held_out_subject: Option<String>,
    pub n_samples: usize,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl FoldMetrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let nc = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..nc).map(|i| confusion[i][i]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut precision = Vec::with_capacity(nc);
        let mut recall = Vec::with_capacity(nc);
        let mut f1 = Vec::with_capacity(nc);
        for c in 0..nc {
            let tp = confusion[c][c];
            let predicted: usize = (0..nc).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / nc as f64;
        Self {
            held_out_subject: None,
            n_samples: n,
            accuracy: ratio(correct, n),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision,
            recall,
            f1,
            confusion,
        }
    }
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<FoldMetrics, TrainError> {
    if predictions.is_empty() {
        return Err(TrainError::Usage("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(TrainError::Usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(TrainError::Usage(format!(
                "class index out of range: predicted {p}, label {l}"
            )));
        }
        confusion[l][p] += 1;
    }
    Ok(FoldMetrics::from_confusion(confusion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub task: Task,
    pub variant: Variant,
    pub validation_subject_count: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(task: Task, variant: Variant, seed: u64) -> Self {
        Self {
            batch_size: 500,
            max_epochs: 200,
            patience: 70,
            lr: 0.001,
            seed,
            task,
            variant,
            validation_subject_count: 2,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Segments flattened for batching; features are already scaled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentSet {
    /// `len * 3840` standardized samples.
    pub samples: Vec<f32>,
    /// `len * 19` scaled features.
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl SegmentSet {
    pub fn from_segments<'a>(
        segments: impl IntoIterator<Item = &'a PreparedSegment>,
        scaler: &FeatureScaler,
    ) -> Self {
        let mut set = Self::default();
        for s in segments {
            set.push(&s.samples, &scaler.transform(&s.features), s.label);
        }
        set
    }

    pub fn push(&mut self, samples: &[f32], features: &[f64; N_FEATURES], label: usize) {
        assert_eq!(samples.len(), SEGMENT_INPUT_LEN, "segment length");
        self.samples.extend_from_slice(samples);
        self.features.extend(features.iter().map(|&v| v as f32));
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Model input for the given rows, in order.
    pub fn batch(&self, rows: &[usize], variant: Variant) -> ModelInput<f32> {
        let mut seg = Vec::with_capacity(rows.len() * SEGMENT_INPUT_LEN);
        for &r in rows {
            seg.extend_from_slice(
                &self.samples[r * SEGMENT_INPUT_LEN..(r + 1) * SEGMENT_INPUT_LEN],
            );
        }
        let features = variant.uses_features().then(|| {
            let mut f = Vec::with_capacity(rows.len() * N_FEATURES);
            for &r in rows {
                f.extend_from_slice(&self.features[r * N_FEATURES..(r + 1) * N_FEATURES]);
            }
            Tensor::from_vec(&[rows.len(), N_FEATURES], f).expect("feature batch")
        });
        ModelInput {
            segments: Tensor::from_vec(&[rows.len(), SEGMENT_INPUT_LEN, 1], seg)
                .expect("segment batch"),
            features,
        }
    }
}

/// Inference-mode class predictions, evaluated in chunks of `chunk` rows.
pub fn predict_set(
    model: &ModelState<f32>,
    set: &SegmentSet,
    chunk: usize,
) -> Result<Vec<usize>, TrainError> {
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for part in rows.chunks(chunk.max(1)) {
        let probs = model.predict(&set.batch(part, model.variant))?;
        out.extend(argmax_rows(&probs));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted cross-entropy over the epoch's training samples.
    pub loss: f64,
    pub val_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub class_weights: Vec<f64>,
    pub steps: u64,
}

/// Trains a fresh model, monitoring macro recall on `val` after every epoch
/// and returning the parameters of the first epoch that reached the best
/// value.
pub fn train_model(
    config: &TrainConfig,
    train: &SegmentSet,
    val: &SegmentSet,
) -> Result<(ModelState<f32>, TrainHistory), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Config("empty validation set".into()));
    }
    let nc = config.task.n_classes();
    let weights_f64 = class_weights(&train.class_counts(nc))?;
    let weights: Vec<f32> = weights_f64.iter().map(|&w| w as f32).collect();
    let opt = Adam::with_lr(config.lr);

    let mut model: ModelState<f32> =
        build_model_with(config.variant, nc, config.seed, config.model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_recall: f64::NEG_INFINITY,
        class_weights: weights_f64,
        steps: 0,
    };
    let mut best = model.clone();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for rows in order.chunks(config.batch_size) {
            let input = train.batch(rows, config.variant);
            let targets: Vec<usize> = rows.iter().map(|&r| train.labels[r]).collect();
            let (probs, trace) = model.forward(&input, Mode::Train(&mut rng))?;
            let trace = trace.expect("training forward returns a trace");
            loss_sum += f64::from(weighted_cce(&probs, &targets, &weights)) * rows.len() as f64;
            let grads = model.backward(&trace, &probs, &targets, &weights)?;
            model.adam_step(&grads, &opt)?;
        }
        let predictions = predict_set(&model, val, config.batch_size)?;
        let val_recall = compute_metrics(&predictions, &val.labels, nc)?.macro_recall;
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            val_recall,
        });
        if val_recall > history.best_val_recall {
            history.best_val_recall = val_recall;
            history.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    history.steps = model.step();
    Ok((best, history))
}

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seed for one fold: the first 8 bytes of SHA-256 over the global seed and
/// the held-out subject id.
pub fn fold_seed(global_seed: u64, subject_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(subject_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Subject assignment for one LOSO fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test: String,
    pub validation: Vec<String>,
    pub train: Vec<String>,
    pub seed: u64,
}

impl FoldSplit {
    /// Fails when the held-out subject also appears in training or
    /// validation, or the two pools overlap.
    pub fn check_leakage(&self) -> Result<(), TrainError> {
        let train: BTreeSet<&str> = self.train.iter().map(String::as_str).collect();
        let val: BTreeSet<&str> = self.validation.iter().map(String::as_str).collect();
        if train.contains(self.test.as_str()) || val.contains(self.test.as_str()) {
            return Err(TrainError::Usage(format!(
                "test subject {} leaks into its own fold",
                self.test
            )));
        }
        if let Some(s) = train.intersection(&val).next() {
            return Err(TrainError::Usage(format!(
                "subject {s} is in both train and validation"
            )));
        }
        Ok(())
    }
}

/// One fold per subject: that subject is the test set, `n_val` others are
/// drawn for validation with the fold seed, the rest train.
pub fn loso_splits(
    subject_ids: &[String],
    n_val: usize,
    global_seed: u64,
) -> Result<Vec<FoldSplit>, TrainError> {
    let unique: BTreeSet<&String> = subject_ids.iter().collect();
    if unique.len() != subject_ids.len() {
        return Err(TrainError::Usage("duplicate subject ids".into()));
    }
    if subject_ids.len() < n_val + 2 {
        return Err(TrainError::Config(format!(
            "{} subjects cannot provide a test subject, {n_val} validation subjects and a training pool",
            subject_ids.len()
        )));
    }
    subject_ids
        .iter()
        .map(|test| {
            let seed = fold_seed(global_seed, test);
            let mut rest: Vec<String> =
                subject_ids.iter().filter(|s| *s != test).cloned().collect();
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let train = rest.split_off(n_val);
            let mut validation = rest;
            validation.sort();
            let mut train = train;
            train.sort();
            let split = FoldSplit {
                test: test.clone(),
                validation,
                train,
                seed,
            };
            split.check_leakage()?;
            Ok(split)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub subject: String,
    pub validation_subjects: Vec<String>,
    pub train_subjects: Vec<String>,
    pub seed: u64,
    /// Set when the fold was skipped.
    pub warning: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub metrics: Option<FoldMetrics>,
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
}

pub struct LosoOutcome {
    pub folds: Vec<FoldRecord>,
    /// Metrics over the concatenated test predictions of every trained fold.
    pub pooled: FoldMetrics,
    pub per_fold: FoldSummary,
    /// Best model of each trained fold, keyed by held-out subject.
    pub models: Vec<(String, ModelState<f32>)>,
}

fn collect_set<'a>(subjects: &'a [PreparedSubject], ids: &[String]) -> Vec<&'a PreparedSegment> {
    subjects
        .iter()
        .filter(|s| ids.contains(&s.subject_id))
        .flat_map(|s| &s.segments)
        .collect()
}

type FoldResult = (
    FoldRecord,
    Option<(ModelState<f32>, Vec<usize>, Vec<usize>)>,
);

fn run_fold(
    subjects: &[PreparedSubject],
    split: &FoldSplit,
    config: &TrainConfig,
) -> Result<FoldResult, TrainError> {
    split.check_leakage()?;
    let test = collect_set(subjects, std::slice::from_ref(&split.test));
    let mut record = FoldRecord {
        subject: split.test.clone(),
        validation_subjects: split.validation.clone(),
        train_subjects: split.train.clone(),
        seed: split.seed,
        warning: None,
        n_train: 0,
        n_val: 0,
        n_test: test.len(),
        metrics: None,
        history: None,
    };
    if test.is_empty() {
        let msg = format!(
            "subject {} has no accepted segments; fold skipped",
            split.test
        );
        warn!("{msg}");
        record.warning = Some(msg);
        return Ok((record, None));
    }
    let train_segs = collect_set(subjects, &split.train);
    let val_segs = collect_set(subjects, &split.validation);
    let scaler = FeatureScaler::fit(train_segs.iter().map(|s| &s.features))?;
    let train = SegmentSet::from_segments(train_segs, &scaler);
    let val = SegmentSet::from_segments(val_segs, &scaler);
    let test = SegmentSet::from_segments(test, &scaler);
    record.n_train = train.len();
    record.n_val = val.len();

    let fold_config = TrainConfig {
        seed: split.seed,
        ..config.clone()
    };
    let (model, history) = train_model(&fold_config, &train, &val)?;
    let predictions = predict_set(&model, &test, config.batch_size)?;
    let mut metrics = compute_metrics(&predictions, &test.labels, config.task.n_classes())?;
    metrics.held_out_subject = Some(split.test.clone());
    info!(
        "fold {}: accuracy {:.4}, macro F1 {:.4} (best epoch {})",
        split.test, metrics.accuracy, metrics.macro_f1, history.best_epoch
    );
    record.metrics = Some(metrics);
    record.history = Some(history);
    Ok((record, Some((model, predictions, test.labels))))
}

/// Leave-one-subject-out evaluation. Folds run in parallel on the current
/// rayon pool; every fold draws its randomness from its own seed, so results
/// do not depend on the pool size.
pub fn run_loso(
    subjects: &[PreparedSubject],
    config: &TrainConfig,
) -> Result<LosoOutcome, TrainError> {
    config.validate()?;
    if subjects.len() < 4 {
        return Err(TrainError::Config(format!(
            "LOSO needs at least 4 subjects, got {}",
            subjects.len()
        )));
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
    let splits = loso_splits(&ids, config.validation_subject_count, config.seed)?;
    let results: Vec<FoldResult> = splits
        .par_iter()
        .map(|split| run_fold(subjects, split, config))
        .collect::<Result<_, _>>()?;

    let mut folds = Vec::with_capacity(results.len());
    let mut models = Vec::new();
    let mut all_pred = Vec::new();
    let mut all_true = Vec::new();
    for (record, trained) in results {
        if let Some((model, pred, truth)) = trained {
            all_pred.extend(pred);
            all_true.extend(truth);
            models.push((record.subject.clone(), model));
        }
        folds.push(record);
    }
    let pooled = compute_metrics(&all_pred, &all_true, config.task.n_classes())?;
    let trained: Vec<&FoldMetrics> = folds.iter().filter_map(|f| f.metrics.as_ref()).collect();
    let accuracy: Vec<f64> = trained.iter().map(|m| m.accuracy).collect();
    let macro_f1: Vec<f64> = trained.iter().map(|m| m.macro_f1).collect();
    let per_fold = FoldSummary {
        accuracy: MeanStd::of(&accuracy).expect("at least one fold"),
        macro_f1: MeanStd::of(&macro_f1).expect("at least one fold"),
    };
    Ok(LosoOutcome {
        folds,
        pooled,
        per_fold,
        models,
    })
}

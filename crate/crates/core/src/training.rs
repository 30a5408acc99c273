//! Mini-batch training with per-epoch validation and early stopping.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::PrecomputedEmbeddings;
use crate::error::{AbsaError, Result};
use crate::evaluation::Metrics;
use crate::graph::Graph;
use crate::model::{Batch, Model, ModelConfig, Sample};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rng::set_seed;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    ValAccuracy,
    ValMacroF1,
    ValLoss,
}

impl StopMetric {
    pub fn name(self) -> &'static str {
        match self {
            StopMetric::ValAccuracy => "val_accuracy",
            StopMetric::ValMacroF1 => "val_macro_f1",
            StopMetric::ValLoss => "val_loss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "val_accuracy" => Ok(StopMetric::ValAccuracy),
            "val_macro_f1" => Ok(StopMetric::ValMacroF1),
            "val_loss" => Ok(StopMetric::ValLoss),
            _ => Err(AbsaError::Config(format!(
                "unknown early-stop metric {s:?} (expected val_accuracy, val_macro_f1 or val_loss)"
            ))),
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != StopMetric::ValLoss
    }

    fn of(self, e: &EpochRecord) -> f64 {
        match self {
            StopMetric::ValAccuracy => e.val_accuracy,
            StopMetric::ValMacroF1 => e.val_macro_f1,
            StopMetric::ValLoss => e.val_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub seed: u64,
    pub metric: StopMetric,
    pub clip_norm: f64,
    /// Linear warmup length in optimizer steps; 0 keeps the rate constant.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            batch_size: 16,
            epochs: 20,
            dropout: 0.1,
            patience: Some(5),
            seed: 0,
            metric: StopMetric::ValAccuracy,
            clip_norm: 1.0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0;
        if !positive(self.lr) || self.batch_size == 0 || self.epochs == 0 || !positive(self.clip_norm) {
            return Err(AbsaError::Config(format!(
                "lr, batch size, epochs and clip norm must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AbsaError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.patience {
            Some(0) => Err(AbsaError::Config("patience must be at least 1".into())),
            Some(p) if p > self.epochs => Err(AbsaError::Config(format!(
                "patience {p} exceeds epoch count {}",
                self.epochs
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    /// Milliseconds since the Unix epoch at the end of the epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub metric: StopMetric,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timestamps(&self) -> Self {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.timestamp_ms = 0;
        }
        h
    }

    pub fn metric_values(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| self.metric.of(e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

fn better(a: f64, b: f64, higher: bool) -> bool {
    if higher {
        a > b
    } else {
        a < b
    }
}

/// Stop iff each of the last `patience` values fails to strictly beat the
/// best value recorded before them.
pub fn early_stop_check(values: &[f64], patience: usize, metric: StopMetric) -> Decision {
    let n = values.len();
    if patience == 0 || n <= patience {
        return Decision::Continue;
    }
    let higher = metric.higher_is_better();
    let (before, recent) = values.split_at(n - patience);
    let best = before
        .iter()
        .copied()
        .reduce(|a, b| if better(b, a, higher) { b } else { a })
        .expect("non-empty prefix");
    if recent.iter().any(|&v| better(v, best, higher)) {
        Decision::Continue
    } else {
        Decision::Stop
    }
}

/// 1-based index of the best value; ties go to the earliest.
pub fn best_epoch(values: &[f64], metric: StopMetric) -> usize {
    let higher = metric.higher_is_better();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if better(v, values[best], higher) {
            best = i;
        }
    }
    best + 1
}

/// A fresh permutation of `0..n` cut into batches; the last may be short.
pub fn epoch_batches<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Samples plus the frozen features they index, if any.
#[derive(Clone, Copy)]
pub struct DataSplit<'a, T: Element> {
    pub samples: &'a [Sample],
    pub features: Option<&'a PrecomputedEmbeddings<T>>,
}

impl<'a, T: Element> DataSplit<'a, T> {
    pub fn new(samples: &'a [Sample]) -> Self {
        DataSplit {
            samples,
            features: None,
        }
    }

    pub fn with_features(samples: &'a [Sample], features: &'a PrecomputedEmbeddings<T>) -> Self {
        DataSplit {
            samples,
            features: Some(features),
        }
    }
}

pub struct TrainOutcome<T: Element> {
    /// Parameters from the best epoch.
    pub model: Model<T>,
    pub history: TrainHistory,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn validation_metrics<T: Element>(model: &Model<T>, split: DataSplit<'_, T>) -> Result<(Metrics, f64)> {
    let preds = model.predict(split.samples, split.features, 64)?;
    let gold: Vec<usize> = split.samples.iter().map(|s| s.label).collect();
    Ok((Metrics::from_pairs(&gold, &preds.labels)?, preds.mean_loss()))
}

pub fn train<T: Element>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_split: DataSplit<'_, T>,
    val_split: DataSplit<'_, T>,
) -> Result<TrainOutcome<T>> {
    train_with_progress(model_config, config, train_split, val_split, &mut |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress<T: Element>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_split: DataSplit<'_, T>,
    val_split: DataSplit<'_, T>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_split.samples.is_empty() || val_split.samples.is_empty() {
        return Err(AbsaError::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mut mc = model_config.clone();
    mc.set_dropout(config.dropout);
    let mut streams = set_seed(config.seed);
    let mut model = Model::<T>::init(mc, &mut streams.init)?;
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut best = model.params.clone();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut stop_reason = StopReason::Completed;
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(train_split.samples.len(), config.batch_size, &mut streams.shuffle);
        let mut loss_sum = 0.0;
        for (bi, chunk) in batches.iter().enumerate() {
            let diverged = |e: AbsaError| match e {
                AbsaError::NonFinite { .. } => AbsaError::Diverged { epoch, batch: bi },
                other => other,
            };
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_split.samples[i]).collect();
            let batch = Batch::new(&refs, &model.config, train_split.features)?;
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let logits = model
                .logits(&mut g, &bound, &batch, true, &mut streams.dropout)
                .map_err(diverged)?;
            let loss = g.cross_entropy(logits, &batch.labels).map_err(diverged)?;
            let loss_value = g.value(loss).item().to_f64();
            if !loss_value.is_finite() {
                return Err(AbsaError::Diverged { epoch, batch: bi });
            }
            loss_sum += loss_value * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let mut per_param: Vec<Option<Vec<T>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            let norm = clip_global_norm(&mut per_param, config.clip_norm);
            if !norm.is_finite() {
                return Err(AbsaError::Diverged { epoch, batch: bi });
            }
            step += 1;
            adam.config.lr = if config.warmup_steps > 0 {
                config.lr * (step as f64 / config.warmup_steps as f64).min(1.0)
            } else {
                config.lr
            };
            adam.step(&mut model.params, &per_param)?;
        }
        let (val, val_loss) = validation_metrics(&model, val_split)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_split.samples.len() as f64,
            val_loss,
            val_accuracy: val.accuracy,
            val_macro_f1: val.macro_f1,
            timestamp_ms: now_ms(),
        };
        progress(&record);
        epochs.push(record);
        let values: Vec<f64> = epochs.iter().map(|e| config.metric.of(e)).collect();
        if best_epoch(&values, config.metric) == epoch {
            best = model.params.clone();
        }
        if let Some(p) = config.patience {
            if early_stop_check(&values, p, config.metric) == Decision::Stop {
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let values: Vec<f64> = epochs.iter().map(|e| config.metric.of(e)).collect();
    model.params = best;
    Ok(TrainOutcome {
        model,
        history: TrainHistory {
            metric: config.metric,
            best_epoch: best_epoch(&values, config.metric),
            epochs,
            stop_reason,
        },
    })
}

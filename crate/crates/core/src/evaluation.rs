//! Classification metrics, multi-seed aggregation and the results table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::PrecomputedEmbeddings;
use crate::error::{AbsaError, Result};
use crate::heads::NUM_CLASSES;
use crate::model::{Model, Sample};
use crate::tensor::Element;

/// Rows are gold labels, columns predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(gold: &[usize], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(AbsaError::dim("confusion", &[gold.len()], &[predicted.len()]));
        }
        let mut m = ConfusionMatrix::default();
        for (i, (&g, &p)) in gold.iter().zip(predicted).enumerate() {
            if g >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(AbsaError::Label {
                    index: i,
                    label: g.max(p),
                });
            }
            m.counts[g][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64
    }

    /// Per-class F1. A class that is neither present nor predicted scores 0.
    pub fn f1_per_class(&self) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        for (c, f) in out.iter_mut().enumerate() {
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum();
            let gold: u64 = self.counts[c].iter().sum();
            // 2 tp / (2 tp + fp + fn)
            let denom = (predicted + gold) as f64;
            *f = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        }
        out
    }

    pub fn macro_f1(&self) -> f64 {
        self.f1_per_class().iter().sum::<f64>() / NUM_CLASSES as f64
    }

    /// Equals accuracy for single-label classification.
    pub fn micro_f1(&self) -> f64 {
        self.accuracy()
    }

    pub fn weighted_f1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let f1 = self.f1_per_class();
        (0..NUM_CLASSES)
            .map(|c| self.counts[c].iter().sum::<u64>() as f64 * f1[c])
            .sum::<f64>()
            / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Metrics {
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            micro_f1: confusion.micro_f1(),
            weighted_f1: confusion.weighted_f1(),
            per_class_f1: confusion.f1_per_class(),
            confusion,
        }
    }

    pub fn from_pairs(gold: &[usize], predicted: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(ConfusionMatrix::from_pairs(gold, predicted)?))
    }
}

/// Scores `model` on `samples`.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    features: Option<&PrecomputedEmbeddings<T>>,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(AbsaError::Config("evaluation on an empty test set".into()));
    }
    let preds = model.predict(samples, features, 64)?;
    let gold: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Metrics::from_pairs(&gold, &preds.labels)
}

/// Mean and standard error (sample std / sqrt(n)) over per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

impl SeedAggregate {
    /// `"m ± s"` with two decimals.
    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std_error)
    }
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedAggregate> {
    if values.len() < 2 {
        return Err(AbsaError::Aggregation(format!(
            "standard error needs at least 2 seeds, got {}",
            values.len()
        )));
    }
    // summing in sorted order makes the result independent of seed order
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    let std = (sq.iter().sum::<f64>() / (n - 1.0)).sqrt();
    Ok(SeedAggregate {
        values: values.to_vec(),
        mean,
        std_error: std / n.sqrt(),
    })
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub encoder: String,
    /// Accuracy in percent.
    pub acc: SeedAggregate,
    /// Macro-F1 in percent.
    pub f1: SeedAggregate,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub early_stop_metric: String,
    pub rows: Vec<ReportRow>,
}

/// Builds one row per `(head, encoder)` cell, in `cells` order.
pub fn experiment_report(
    cells: &[(String, String)],
    results: &BTreeMap<(String, String), Vec<SeedRun>>,
    early_stop_metric: &str,
) -> Result<ExperimentReport> {
    let mut rows = Vec::with_capacity(cells.len());
    for (model, encoder) in cells {
        let runs = results
            .get(&(model.clone(), encoder.clone()))
            .ok_or_else(|| AbsaError::Report(format!("missing cell {model} × {encoder}")))?;
        let pct = |f: fn(&Metrics) -> f64| runs.iter().map(|r| 100.0 * f(&r.test)).collect::<Vec<_>>();
        let acc = aggregate_seeds(&pct(|m| m.accuracy))
            .map_err(|e| AbsaError::Report(format!("cell {model} × {encoder}: {e}")))?;
        let f1 = aggregate_seeds(&pct(|m| m.macro_f1))
            .map_err(|e| AbsaError::Report(format!("cell {model} × {encoder}: {e}")))?;
        rows.push(ReportRow {
            model: model.clone(),
            encoder: encoder.clone(),
            acc,
            f1,
            runs: runs.clone(),
        });
    }
    Ok(ExperimentReport {
        early_stop_metric: early_stop_metric.to_string(),
        rows,
    })
}

impl ExperimentReport {
    /// Aligned `Model  Encoder  ACC  F1` table.
    pub fn to_text(&self) -> String {
        let header = ["Model", "Encoder", "ACC", "F1"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| [r.model.clone(), r.encoder.clone(), r.acc.display(), r.f1.display()])
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |fields: [&str; 4]| {
            let mut s = String::new();
            for (i, (f, w)) in fields.iter().zip(widths).enumerate() {
                if i + 1 == fields.len() {
                    s.push_str(f);
                } else {
                    s.push_str(f);
                    s.push_str(&" ".repeat(w - f.chars().count() + 2));
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(header);
        for row in &cells {
            out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

//! Head × encoder × seed grids with a resumable manifest.
//!
//! The output directory holds `manifest.json` (finished runs, rewritten after
//! each one), `report.txt`, `report.json` and one training history per run
//! under `runs/`. Rerunning with the same specification skips every run
//! already listed in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AbsaError, Result};
use crate::evaluation::{evaluate, experiment_report, ExperimentReport, SeedRun};
use crate::heads::{HeadConfig, HeadKind};
use crate::model::{EncoderSpec, ModelConfig};
use crate::tensor::Element;
use crate::training::{train, DataSplit, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub heads: Vec<HeadKind>,
    pub encoders: Vec<EncoderSpec>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Head hyperparameters; `kind` and `hidden` are filled per cell.
    pub head: HeadConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() || self.encoders.is_empty() {
            return Err(AbsaError::Config("experiment grid is empty".into()));
        }
        if self.seeds.len() < 2 {
            return Err(AbsaError::Config(format!(
                "experiments need at least 2 seeds for a standard error, got {}",
                self.seeds.len()
            )));
        }
        self.train.validate()?;
        for cell in self.cells() {
            cell.validate()?;
        }
        Ok(())
    }

    /// Model configurations in report order: encoders outer, heads inner.
    pub fn cells(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            for &kind in &self.heads {
                let head = HeadConfig {
                    kind,
                    hidden: enc.hidden(),
                    ..self.head.clone()
                };
                out.push(ModelConfig {
                    encoder: enc.clone(),
                    head,
                });
            }
        }
        out
    }
}

pub struct ExperimentData<'a, T: Element> {
    pub train: DataSplit<'a, T>,
    pub val: DataSplit<'a, T>,
    pub test: DataSplit<'a, T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ExperimentSpec,
    /// Keyed by [`run_key`].
    pub completed: BTreeMap<String, SeedRun>,
}

pub fn run_key(head: HeadKind, encoder: &str, seed: u64) -> String {
    format!("{}-{encoder}-seed{seed}", head.name())
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content).map_err(|e| AbsaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AbsaError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Option<Manifest>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(AbsaError::io(path, e)),
    }
}

/// Runs every missing (cell, seed) pair, then writes the reports.
pub fn run_experiment<T: Element>(
    spec: &ExperimentSpec,
    data: &ExperimentData<'_, T>,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    spec.validate()?;
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| AbsaError::io(&runs_dir, e))?;
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = match load_manifest(&manifest_path)? {
        Some(m) if m.spec != *spec => {
            return Err(AbsaError::Config(format!(
                "{} was written for a different experiment; use a fresh output directory",
                manifest_path.display()
            )))
        }
        Some(m) => m,
        None => Manifest {
            spec: spec.clone(),
            completed: BTreeMap::new(),
        },
    };
    let mut results: BTreeMap<(String, String), Vec<SeedRun>> = BTreeMap::new();
    let mut order = Vec::new();
    for cell in spec.cells() {
        let (head, encoder) = (cell.head.kind, cell.encoder.name().to_string());
        let key = (head.label().to_string(), encoder.clone());
        order.push(key.clone());
        for &seed in &spec.seeds {
            let id = run_key(head, &encoder, seed);
            let run = match manifest.completed.get(&id) {
                Some(run) => {
                    log(&format!("{id}: already complete"));
                    run.clone()
                }
                None => {
                    log(&format!("{id}: training"));
                    let config = TrainConfig {
                        seed,
                        ..spec.train.clone()
                    };
                    let outcome = train(&cell, &config, data.train, data.val)?;
                    let test = evaluate(&outcome.model, data.test.samples, data.test.features)?;
                    let run = SeedRun {
                        seed,
                        best_epoch: outcome.history.best_epoch,
                        epochs_run: outcome.history.epochs.len(),
                        test,
                    };
                    let history_path = runs_dir.join(format!("{id}.history.json"));
                    write_atomic(&history_path, &serde_json::to_string_pretty(&outcome.history)?)?;
                    manifest.completed.insert(id.clone(), run.clone());
                    write_atomic(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
                    log(&format!(
                        "{id}: test accuracy {:.4}, macro-F1 {:.4}",
                        run.test.accuracy, run.test.macro_f1
                    ));
                    run
                }
            };
            results.entry(key.clone()).or_default().push(run);
        }
    }
    let report = experiment_report(&order, &results, spec.train.metric.name())?;
    write_atomic(&out_dir.join("report.txt"), &report.to_text())?;
    write_atomic(&out_dir.join("report.json"), &report.to_json()?)?;
    Ok(report)
}

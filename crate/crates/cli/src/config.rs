//! TOML run configuration.
//!
//! Every section and key is optional. Relative paths are resolved against
//! the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use absa_core::dataset::SplitSpec;
use absa_core::encoder::{EncoderConfig, PRESETS};
use absa_core::heads::{HeadConfig, HeadKind, Pooling};
use absa_core::tokenizer::DEFAULT_MAX_LEN;
use absa_core::training::TrainConfig;
use absa_core::{AbsaError, Result};
use serde::{Deserialize, Serialize};

/// Encoder name that selects frozen features instead of a transformer.
pub const PRECOMPUTED: &str = "precomputed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw JSON-lines corpus read by `prepare`.
    pub data: Option<PathBuf>,
    /// Directory with train/val/test JSON-lines files and the vocabulary.
    pub prepared: PathBuf,
    /// Directory with train/val/test `.emb` files for the precomputed encoder.
    pub features: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: None,
            prepared: "prepared".into(),
            features: None,
            checkpoint: "model.ckpt".into(),
            history: "history.json".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// An encoder preset name or `precomputed`.
    pub preset: String,
    pub head: HeadKind,
    pub max_len: usize,
    pub min_freq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            head: HeadKind::Fcn,
            max_len: DEFAULT_MAX_LEN,
            min_freq: 1,
        }
    }
}

/// Head hyperparameters shared by every head kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub fcn_hidden: usize,
    pub fcn_pooling: Pooling,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
    pub gcn_layers: usize,
    pub gcn_window: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadConfig::new(HeadKind::Fcn, 0);
        HeadSection {
            fcn_hidden: h.fcn_hidden,
            fcn_pooling: h.fcn_pooling,
            cnn_channels: h.cnn_channels,
            cnn_kernel: h.cnn_kernel,
            gcn_layers: h.gcn_layers,
            gcn_window: h.gcn_window,
        }
    }
}

impl HeadSection {
    pub fn config(&self, kind: HeadKind, hidden: usize, dropout: f64) -> HeadConfig {
        HeadConfig {
            kind,
            hidden,
            fcn_hidden: self.fcn_hidden,
            fcn_pooling: self.fcn_pooling,
            cnn_channels: self.cnn_channels,
            cnn_kernel: self.cnn_kernel,
            gcn_layers: self.gcn_layers,
            gcn_window: self.gcn_window,
            dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub heads: Vec<HeadKind>,
    pub presets: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            heads: HeadKind::ALL.to_vec(),
            presets: vec!["tiny".into()],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub head: HeadSection,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AbsaError::Config(format!("invalid config: {e}")))
    }

    /// Reads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AbsaError::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            AbsaError::Config(m) => AbsaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.paths.rebase(base);
        Ok(config)
    }

    /// Checks preset names and seeds; the typed sections validate themselves later.
    pub fn validate(&self) -> Result<()> {
        check_preset(&self.model.preset)?;
        for p in &self.experiment.presets {
            check_preset(p)?;
        }
        if self.experiment.seeds.is_empty() {
            return Err(AbsaError::Config("seed list is empty".into()));
        }
        if self.experiment.heads.is_empty() || self.experiment.presets.is_empty() {
            return Err(AbsaError::Config("experiment grid is empty".into()));
        }
        self.split.validate()?;
        self.train.validate()
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.prepared,
            &mut self.checkpoint,
            &mut self.history,
            &mut self.reports,
        ] {
            join(p);
        }
        for p in [&mut self.data, &mut self.features].into_iter().flatten() {
            join(p);
        }
    }
}

pub fn check_preset(name: &str) -> Result<()> {
    if name == PRECOMPUTED {
        return Ok(());
    }
    EncoderConfig::preset(name).map(|_| ()).map_err(|_| {
        AbsaError::Config(format!(
            "unknown encoder preset {name:?} (expected one of {PRESETS:?} or {PRECOMPUTED:?})"
        ))
    })
}

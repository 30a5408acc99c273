//! Encoder plus head, batching, and inference.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Example;
use crate::encoder::{self, EncoderConfig, PrecomputedEmbeddings, TokenBatch};
use crate::error::{AbsaError, Result};
use crate::graph::{Graph, Var};
use crate::heads::{self, build_word_graph, HeadConfig, HeadInputs, HeadKind, NUM_CLASSES};
use crate::params::{Bound, ParamStore};
use crate::rng::{stream, DROPOUT_STREAM};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::{encode, EncodedInput, Vocab};

/// Where per-token hidden states come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Transformer(EncoderConfig),
    /// Frozen features loaded from a tensor file.
    Precomputed {
        name: String,
        hidden: usize,
    },
}

impl EncoderSpec {
    pub fn hidden(&self) -> usize {
        match self {
            EncoderSpec::Transformer(c) => c.hidden,
            EncoderSpec::Precomputed { hidden, .. } => *hidden,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            EncoderSpec::Transformer(c) => &c.preset,
            EncoderSpec::Precomputed { name, .. } => name,
        }
    }

    pub fn is_precomputed(&self) -> bool {
        matches!(self, EncoderSpec::Precomputed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn new(encoder: EncoderSpec, kind: HeadKind) -> Self {
        let head = HeadConfig::new(kind, encoder.hidden());
        ModelConfig { encoder, head }
    }

    pub fn validate(&self) -> Result<()> {
        if let EncoderSpec::Transformer(c) = &self.encoder {
            c.validate()?;
        }
        self.head.validate()?;
        if self.head.hidden != self.encoder.hidden() {
            return Err(AbsaError::dim("model", &[self.encoder.hidden()], &[self.head.hidden]));
        }
        Ok(())
    }

    /// Sets the dropout probability of both encoder and head.
    pub fn set_dropout(&mut self, p: f64) {
        if let EncoderSpec::Transformer(c) = &mut self.encoder {
            c.dropout = p;
        }
        self.head.dropout = p;
    }
}

/// One labelled, encoded example. `key` names its row in a precomputed file.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: EncodedInput,
    pub label: usize,
    pub key: String,
}

/// Encodes `examples`, keying each by its position (`ex<index>`).
pub fn encode_samples(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<Sample>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Sample {
                input: encode(e, vocab, max_len)?,
                label: e.label.index(),
                key: encoder::precomputed_name(i),
            })
        })
        .collect()
}

/// Model inputs for a group of samples, trimmed to their longest real length.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub tokens: TokenBatch,
    pub head: HeadInputs<T>,
    pub labels: Vec<usize>,
    /// `[B, len, D]` frozen features for the precomputed path.
    pub features: Option<Tensor<T>>,
}

impl<T: Element> Batch<T> {
    pub fn new(samples: &[&Sample], config: &ModelConfig, features: Option<&PrecomputedEmbeddings<T>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(AbsaError::Config("empty batch".into()));
        }
        let len = samples.iter().map(|s| s.input.real_len()).max().unwrap_or(1).max(1);
        let b = samples.len();
        let mut ids = Vec::with_capacity(b * len);
        let mut segments = Vec::with_capacity(b * len);
        let mut pad = Vec::with_capacity(b * len);
        let mut aspect = Vec::with_capacity(b * len);
        let mut adjacency = Vec::new();
        for s in samples {
            let e = &s.input;
            ids.extend(e.ids[..len].iter().map(|&i| i as usize));
            segments.extend(e.segment[..len].iter().map(|&i| i as usize));
            pad.extend(e.pad_mask[..len].iter().map(|&m| m == 1));
            aspect.extend(e.aspect_mask[..len].iter().map(|&m| m == 1));
            if config.head.kind == HeadKind::Gcn {
                adjacency.extend(build_word_graph(e, config.head.gcn_window).block::<T>(len));
            }
        }
        let features = match (&config.encoder, features) {
            (EncoderSpec::Precomputed { .. }, Some(f)) => {
                let keys: Vec<&str> = samples.iter().map(|s| s.key.as_str()).collect();
                Some(f.hidden_states(&keys, len)?)
            }
            (EncoderSpec::Precomputed { .. }, None) => {
                return Err(AbsaError::Config("precomputed encoder needs an embedding file".into()))
            }
            (EncoderSpec::Transformer(_), _) => None,
        };
        let adjacency = if config.head.kind == HeadKind::Gcn {
            Some(Tensor::new(vec![b, len, len], adjacency)?)
        } else {
            None
        };
        Ok(Batch {
            tokens: TokenBatch {
                batch: b,
                len,
                ids,
                segments,
                pad_mask: pad.clone(),
            },
            head: HeadInputs {
                batch: b,
                len,
                pad_mask: pad,
                aspect_mask: aspect,
                adjacency,
            },
            labels: samples.iter().map(|s| s.label).collect(),
            features,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        if let EncoderSpec::Transformer(c) = &config.encoder {
            encoder::init_params(c, &mut params, rng)?;
        }
        heads::init_params(&config.head, &mut params, rng)?;
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count("")
    }

    /// Records the forward pass into `g`; returns `[B, 3]` logits.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        batch: &Batch<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let hidden = match &self.config.encoder {
            EncoderSpec::Transformer(c) => encoder::encode_batch(g, p, c, &batch.tokens, training, rng)?.hidden,
            EncoderSpec::Precomputed { .. } => {
                let f = batch
                    .features
                    .clone()
                    .ok_or_else(|| AbsaError::Config("batch carries no precomputed features".into()))?;
                g.constant(f)
            }
        };
        heads::forward(g, p, &self.config.head, hidden, &batch.head, training, rng)
    }

    /// Class probabilities `[B, 3]` in inference mode.
    pub fn predict_proba(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        // inference draws no random numbers; the stream only satisfies the signature
        let mut rng = stream(0, DROPOUT_STREAM);
        let logits = self.logits(&mut g, &p, batch, false, &mut rng)?;
        let probs = g.softmax_rows(logits)?;
        Ok(g.value(probs).clone())
    }

    /// Argmax labels, probabilities and summed cross-entropy over `samples`.
    pub fn predict(
        &self,
        samples: &[Sample],
        features: Option<&PrecomputedEmbeddings<T>>,
        batch_size: usize,
    ) -> Result<Predictions> {
        let mut out = Predictions::default();
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::new(&refs, &self.config, features)?;
            let probs = self.predict_proba(&batch)?;
            for (row, s) in probs.data().chunks(NUM_CLASSES).zip(chunk) {
                let row: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                out.loss_sum += -row[s.label].max(f64::MIN_POSITIVE).ln();
                out.labels.push(best);
                out.probabilities.push(row);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        Checkpoint::new(self.params.clone()).with_meta("model", &self.config)
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let config: ModelConfig = ck.meta_value("model")?;
        config.validate()?;
        let reference = Model::<T>::init(config.clone(), &mut stream(0, 0))?;
        for (name, t) in reference.params.iter() {
            let got = ck.tensors.get(name)?;
            if got.shape() != t.shape() {
                return Err(AbsaError::Dimension {
                    op: "checkpoint",
                    left: got.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut params = ParamStore::new();
        for (name, _) in reference.params.iter() {
            params.insert(name, ck.tensors.get(name)?.clone());
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub loss_sum: f64,
}

impl Predictions {
    pub fn mean_loss(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.loss_sum / self.labels.len() as f64
        }
    }
}

//! Per-token hidden states: a small trainable transformer encoder, or
//! frozen embeddings computed elsewhere and loaded from a tensor container.
//!
//! The transformer follows the original post-layer-norm arrangement:
//!
//! ```text
//! x   = LN(word[id] + position[t] + segment[s])
//! per layer:
//!   a = MultiHeadAttention(x)            (padding keys masked with -inf)
//!   x = LN(x + dropout(a Wo + bo))
//!   f = relu(x W1 + b1) W2 + b2
//!   x = LN(x + dropout(f))
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{AbsaError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub preset: String,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

/// Preset names accepted by [`EncoderConfig::preset`].
pub const PRESETS: &[&str] = &["tiny", "mini", "bert-base", "covid-twitter-bert"];

impl EncoderConfig {
    /// Named architecture presets. `tiny` is the working default; the two
    /// large presets exist for configuration parity and parameter accounting.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, heads, hidden) = match name {
            "tiny" => (2, 2, 64),
            "mini" => (1, 2, 32),
            "bert-base" => (12, 12, 768),
            // 1024 is not divisible by 12; 16 heads as in large BERT models
            "covid-twitter-bert" => (12, 16, 1024),
            other => {
                return Err(AbsaError::Config(format!(
                    "unknown encoder preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        Ok(EncoderConfig {
            preset: name.to_string(),
            layers,
            heads,
            hidden,
            ffn: 4 * hidden,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            dropout: 0.1,
            vocab_size: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 || self.max_len == 0 {
            return Err(AbsaError::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(AbsaError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < crate::tokenizer::RESERVED.len() {
            return Err(AbsaError::Config("encoder vocabulary size is not set".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AbsaError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let emb = (self.vocab_size + self.max_len + 2) * d + 2 * d;
        let layer = 4 * (d * d + d) + (d * self.ffn + self.ffn) + (self.ffn * d + d) + 4 * d;
        emb + self.layers * layer
    }
}

/// Draws from N(0, std²) truncated to two standard deviations.
pub fn truncated_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

pub(crate) fn layer_name(i: usize, part: &str) -> String {
    format!("encoder/layer{i}/{part}")
}

/// Initializes encoder parameters into `store`.
pub fn init_params<T: Element, R: Rng + ?Sized>(
    config: &EncoderConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    let d = config.hidden;
    store.insert("encoder/word", truncated_normal(&[config.vocab_size, d], INIT_STD, rng));
    store.insert(
        "encoder/position",
        truncated_normal(&[config.max_len, d], INIT_STD, rng),
    );
    store.insert("encoder/segment", truncated_normal(&[2, d], INIT_STD, rng));
    store.insert("encoder/emb_ln/gamma", Tensor::ones(&[d]));
    store.insert("encoder/emb_ln/beta", Tensor::zeros(&[d]));
    for i in 0..config.layers {
        for proj in ["q", "k", "v", "o"] {
            store.insert(
                layer_name(i, &format!("{proj}/w")),
                truncated_normal(&[d, d], INIT_STD, rng),
            );
            store.insert(layer_name(i, &format!("{proj}/b")), Tensor::zeros(&[d]));
        }
        store.insert(layer_name(i, "attn_ln/gamma"), Tensor::ones(&[d]));
        store.insert(layer_name(i, "attn_ln/beta"), Tensor::zeros(&[d]));
        store.insert(
            layer_name(i, "ffn1/w"),
            truncated_normal(&[d, config.ffn], INIT_STD, rng),
        );
        store.insert(layer_name(i, "ffn1/b"), Tensor::zeros(&[config.ffn]));
        store.insert(
            layer_name(i, "ffn2/w"),
            truncated_normal(&[config.ffn, d], INIT_STD, rng),
        );
        store.insert(layer_name(i, "ffn2/b"), Tensor::zeros(&[d]));
        store.insert(layer_name(i, "ffn_ln/gamma"), Tensor::ones(&[d]));
        store.insert(layer_name(i, "ffn_ln/beta"), Tensor::zeros(&[d]));
    }
    Ok(())
}

/// Token-level inputs for one batch, trimmed to a common length.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

pub struct EncoderOutput {
    /// `[B, L, D]`
    pub hidden: Var,
    /// One attention node per layer; weights via [`Graph::attention_weights`].
    pub attention: Vec<Var>,
}

fn linear<T: Element>(g: &mut Graph<T>, p: &Bound<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}/w"))?;
    let b = p.var(&format!("{name}/b"))?;
    g.linear(x, w, b)
}

fn layer_norm<T: Element>(g: &mut Graph<T>, p: &Bound<'_, T>, x: Var, name: &str) -> Result<Var> {
    let gamma = p.var(&format!("{name}/gamma"))?;
    let beta = p.var(&format!("{name}/beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Runs the transformer over a batch.
pub fn encode_batch<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &EncoderConfig,
    tokens: &TokenBatch,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let (b, l, d) = (tokens.batch, tokens.len, config.hidden);
    if l > config.max_len || tokens.ids.len() != b * l {
        return Err(AbsaError::dim(
            "encode_batch",
            &[b, l],
            &[config.max_len, tokens.ids.len()],
        ));
    }
    let positions: Vec<usize> = (0..b * l).map(|i| i % l).collect();
    let word = g.embedding(p.var("encoder/word")?, &tokens.ids)?;
    let pos = g.embedding(p.var("encoder/position")?, &positions)?;
    let seg = g.embedding(p.var("encoder/segment")?, &tokens.segments)?;
    let x = g.add(word, pos)?;
    let x = g.add(x, seg)?;
    let x = layer_norm(g, p, x, "encoder/emb_ln")?;
    let mut x = g.dropout(x, config.dropout, training, rng)?;
    let mut attention = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let q = linear(g, p, x, &layer_name(i, "q"))?;
        let k = linear(g, p, x, &layer_name(i, "k"))?;
        let v = linear(g, p, x, &layer_name(i, "v"))?;
        let a = g.attention(q, k, v, &tokens.pad_mask, b, config.heads)?;
        attention.push(a);
        let o = linear(g, p, a, &layer_name(i, "o"))?;
        let o = g.dropout(o, config.dropout, training, rng)?;
        let r = g.add(x, o)?;
        x = layer_norm(g, p, r, &layer_name(i, "attn_ln"))?;
        let f = linear(g, p, x, &layer_name(i, "ffn1"))?;
        let f = g.relu(f)?;
        let f = linear(g, p, f, &layer_name(i, "ffn2"))?;
        let f = g.dropout(f, config.dropout, training, rng)?;
        let r = g.add(x, f)?;
        x = layer_norm(g, p, r, &layer_name(i, "ffn_ln"))?;
    }
    let hidden = g.reshape(x, &[b, l, d])?;
    Ok(EncoderOutput { hidden, attention })
}

/// Name of the tensor holding example `index` in a precomputed file.
pub fn precomputed_name(index: usize) -> String {
    format!("ex{index}")
}

/// Frozen per-token embeddings keyed by example index.
///
/// File format: the tensor container with one `[L, D]` tensor per example,
/// named `ex<index>` where `index` is the example's 0-based record position
/// in its JSON-lines file. Rows align with the encoded layout
/// (`[CLS] sentence [SEP] aspect [SEP] padding`).
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings<T: Element = f32> {
    tensors: ParamStore<T>,
    hidden: usize,
    max_len: usize,
}

impl<T: Element> PrecomputedEmbeddings<T> {
    pub fn from_store(tensors: ParamStore<T>, expected_hidden: usize) -> Result<Self> {
        let mut max_len = None;
        for (name, t) in tensors.iter() {
            if t.ndim() != 2 || t.shape()[1] != expected_hidden {
                return Err(AbsaError::Dimension {
                    op: "load_precomputed",
                    left: t.shape().to_vec(),
                    right: vec![expected_hidden],
                });
            }
            match max_len {
                None => max_len = Some(t.shape()[0]),
                Some(l) if l != t.shape()[0] => {
                    return Err(AbsaError::Format(format!(
                        "{name} has {} rows, expected {l}",
                        t.shape()[0]
                    )))
                }
                _ => {}
            }
        }
        Ok(PrecomputedEmbeddings {
            tensors,
            hidden: expected_hidden,
            max_len: max_len.unwrap_or(0),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<T>> {
        self.tensors.get(key)
    }

    /// Stacks the first `len` rows of each keyed tensor into `[B, len, D]`.
    pub fn hidden_states(&self, keys: &[&str], len: usize) -> Result<Tensor<T>> {
        if len > self.max_len {
            return Err(AbsaError::dim("precomputed", &[len], &[self.max_len]));
        }
        let mut data = Vec::with_capacity(keys.len() * len * self.hidden);
        for key in keys {
            let t = self.get(key)?;
            data.extend_from_slice(&t.data()[..len * self.hidden]);
        }
        Tensor::new(vec![keys.len(), len, self.hidden], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::new(self.tensors.clone()).save(path)
    }
}

pub fn load_precomputed<T: Element>(
    path: impl AsRef<Path>,
    expected_hidden: usize,
) -> Result<PrecomputedEmbeddings<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    PrecomputedEmbeddings::from_store(ck.tensors, expected_hidden)
}

/// Writes `[L, D]` tensors under `ex<index>` names.
pub fn export_precomputed<T: Element>(path: impl AsRef<Path>, tensors: &[Tensor<T>]) -> Result<()> {
    let mut store = ParamStore::new();
    for (i, t) in tensors.iter().enumerate() {
        store.insert(precomputed_name(i), t.clone());
    }
    Checkpoint::new(store).save(path)
}

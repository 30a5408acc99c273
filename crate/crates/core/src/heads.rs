//! Classifier heads over per-token hidden states: FCN, CNN and GCN.
//!
//! Weights are stored input-major (`x W`), so the FCN's first layer is a
//! `[D, 300]` tensor and its second `[300, 3]`. All head parameters live
//! under the `head/` prefix.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{truncated_normal, INIT_STD};
use crate::error::{AbsaError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::EncodedInput;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Fcn,
    Cnn,
    Gcn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Fcn, HeadKind::Cnn, HeadKind::Gcn];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Fcn => "fcn",
            HeadKind::Cnn => "cnn",
            HeadKind::Gcn => "gcn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Fcn => "FCN",
            HeadKind::Cnn => "CNN",
            HeadKind::Gcn => "GCN",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = AbsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Ok(HeadKind::Fcn),
            "cnn" => Ok(HeadKind::Cnn),
            "gcn" => Ok(HeadKind::Gcn),
            _ => Err(AbsaError::Config(format!(
                "unknown head {s:?} (expected fcn, cnn or gcn)"
            ))),
        }
    }
}

/// Which positions the FCN head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    /// Mean over non-padding positions.
    Mean,
    /// Mean over aspect positions.
    Aspect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub hidden: usize,
    pub fcn_hidden: usize,
    pub fcn_pooling: Pooling,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
    pub gcn_layers: usize,
    pub gcn_window: usize,
    pub dropout: f64,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, hidden: usize) -> Self {
        HeadConfig {
            kind,
            hidden,
            fcn_hidden: 300,
            fcn_pooling: Pooling::Cls,
            cnn_channels: 100,
            cnn_kernel: 3,
            gcn_layers: 2,
            gcn_window: 2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = match self.kind {
            HeadKind::Fcn => vec![self.hidden, self.fcn_hidden],
            HeadKind::Cnn => vec![self.hidden, self.cnn_channels, self.cnn_kernel],
            HeadKind::Gcn => vec![self.hidden, self.gcn_layers],
        };
        if sizes.contains(&0) {
            return Err(AbsaError::Config(format!("head dimensions must be positive: {self:?}")));
        }
        if self.kind == HeadKind::Cnn && self.cnn_kernel.is_multiple_of(2) {
            return Err(AbsaError::Config(format!(
                "cnn kernel width must be odd, got {}",
                self.cnn_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AbsaError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Trainable scalar count of this head.
    pub fn param_count(&self) -> usize {
        let (d, c) = (self.hidden, NUM_CLASSES);
        match self.kind {
            HeadKind::Fcn => d * self.fcn_hidden + self.fcn_hidden + self.fcn_hidden * c + c,
            HeadKind::Cnn => {
                let (k, ch) = (self.cnn_kernel, self.cnn_channels);
                k * d * ch + ch + k * ch * ch + ch + ch * c + c
            }
            HeadKind::Gcn => self.gcn_layers * d * d + d * c + c,
        }
    }
}

pub fn init_params<T: Element, R: Rng + ?Sized>(
    config: &HeadConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    let (d, c) = (config.hidden, NUM_CLASSES);
    match config.kind {
        HeadKind::Fcn => {
            let h = config.fcn_hidden;
            store.insert("head/fcn/w1", truncated_normal(&[d, h], INIT_STD, rng));
            store.insert("head/fcn/b1", Tensor::zeros(&[h]));
            store.insert("head/fcn/w2", truncated_normal(&[h, c], INIT_STD, rng));
            store.insert("head/fcn/b2", Tensor::zeros(&[c]));
        }
        HeadKind::Cnn => {
            let (k, ch) = (config.cnn_kernel, config.cnn_channels);
            store.insert("head/cnn/k1", truncated_normal(&[k, d, ch], INIT_STD, rng));
            store.insert("head/cnn/b1", Tensor::zeros(&[ch]));
            store.insert("head/cnn/k2", truncated_normal(&[k, ch, ch], INIT_STD, rng));
            store.insert("head/cnn/b2", Tensor::zeros(&[ch]));
            store.insert("head/cnn/w", truncated_normal(&[ch, c], INIT_STD, rng));
            store.insert("head/cnn/b", Tensor::zeros(&[c]));
        }
        HeadKind::Gcn => {
            for i in 1..=config.gcn_layers {
                store.insert(format!("head/gcn/w{i}"), truncated_normal(&[d, d], INIT_STD, rng));
            }
            store.insert("head/gcn/w", truncated_normal(&[d, c], INIT_STD, rng));
            store.insert("head/gcn/b", Tensor::zeros(&[c]));
        }
    }
    Ok(())
}

/// Normalized word graph `D^-1/2 (A + I) D^-1/2` over sentence positions.
///
/// Nodes are the sentence token positions of an [`EncodedInput`]; rows and
/// columns of `[CLS]`, `[SEP]`, aspect-segment and padding positions are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WordGraph {
    pub len: usize,
    /// Row-major `[len, len]`.
    pub adjacency: Vec<f64>,
}

impl WordGraph {
    /// Normalizes a raw 0/1 adjacency over the `active` nodes.
    pub fn from_edges(len: usize, active: &[bool], edges: &[(usize, usize)]) -> Self {
        let mut a = vec![0.0; len * len];
        for i in (0..len).filter(|&i| active[i]) {
            a[i * len + i] = 1.0;
        }
        for &(i, j) in edges {
            if i != j && active[i] && active[j] {
                a[i * len + j] = 1.0;
                a[j * len + i] = 1.0;
            }
        }
        let deg: Vec<f64> = (0..len).map(|i| a[i * len..(i + 1) * len].iter().sum()).collect();
        for i in 0..len {
            for j in 0..len {
                if a[i * len + j] != 0.0 {
                    a[i * len + j] /= (deg[i] * deg[j]).sqrt();
                }
            }
        }
        WordGraph { len, adjacency: a }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.len + j]
    }

    /// Leading `[len, len]` block, cast.
    pub fn block<T: Element>(&self, len: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(len * len);
        for i in 0..len {
            out.extend(
                self.adjacency[i * self.len..i * self.len + len]
                    .iter()
                    .map(|&v| T::from_f64(v)),
            );
        }
        out
    }
}

/// Sliding-window edges (`0 < |i - j| <= window`) plus edges from every
/// sentence position to every aspect position.
pub fn build_word_graph(encoded: &EncodedInput, window: usize) -> WordGraph {
    let len = encoded.max_len();
    let sentence = encoded.sentence_positions();
    let mut active = vec![false; len];
    for i in sentence.clone() {
        active[i] = encoded.pad_mask[i] == 1;
    }
    let mut edges = Vec::new();
    for i in sentence.clone() {
        for j in i + 1..sentence.end.min(i + window + 1) {
            edges.push((i, j));
        }
        if encoded.aspect_mask[i] == 1 {
            edges.extend(sentence.clone().map(|j| (i, j)));
        }
    }
    WordGraph::from_edges(len, &active, &edges)
}

/// Per-batch masks and graphs, trimmed to length `len`.
#[derive(Debug, Clone)]
pub struct HeadInputs<T: Element> {
    pub batch: usize,
    pub len: usize,
    pub pad_mask: Vec<bool>,
    pub aspect_mask: Vec<bool>,
    /// `[B, len, len]`, required by the GCN head.
    pub adjacency: Option<Tensor<T>>,
}

fn weights<T: Element>(mask: &[bool]) -> Vec<T> {
    mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
}

fn check_hidden<T: Element>(g: &Graph<T>, h: Var, config: &HeadConfig, inputs: &HeadInputs<T>) -> Result<()> {
    let want = [inputs.batch, inputs.len, config.hidden];
    if g.shape(h) != want {
        return Err(AbsaError::dim(config.kind.name(), g.shape(h), &want));
    }
    Ok(())
}

pub fn fcn_forward<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &HeadConfig,
    h: Var,
    inputs: &HeadInputs<T>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_hidden(g, h, config, inputs)?;
    let pooled = match config.fcn_pooling {
        Pooling::Cls => {
            let rows: Vec<usize> = (0..inputs.batch).map(|b| b * inputs.len).collect();
            g.select_rows(h, &rows)?
        }
        Pooling::Mean => g.mean_pool_time(h, &weights(&inputs.pad_mask))?,
        Pooling::Aspect => g.mean_pool_time(h, &weights(&inputs.aspect_mask))?,
    };
    let pooled = g.dropout(pooled, config.dropout, training, rng)?;
    let z = g.linear(pooled, p.var("head/fcn/w1")?, p.var("head/fcn/b1")?)?;
    let z = g.relu(z)?;
    g.linear(z, p.var("head/fcn/w2")?, p.var("head/fcn/b2")?)
}

pub fn cnn_forward<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &HeadConfig,
    h: Var,
    inputs: &HeadInputs<T>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_hidden(g, h, config, inputs)?;
    if let Some(b) = (0..inputs.batch).find(|&b| !inputs.pad_mask[b * inputs.len..(b + 1) * inputs.len].contains(&true))
    {
        return Err(AbsaError::Contract(format!(
            "cnn head on an all-padding input (batch row {b})"
        )));
    }
    let keep = weights::<T>(&inputs.pad_mask);
    let x = g.mask_rows(h, &keep)?;
    let x = g.conv1d(x, p.var("head/cnn/k1")?, p.var("head/cnn/b1")?)?;
    let x = g.relu(x)?;
    let x = g.mask_rows(x, &keep)?;
    let x = g.conv1d(x, p.var("head/cnn/k2")?, p.var("head/cnn/b2")?)?;
    let x = g.relu(x)?;
    let pooled = g.max_pool_time(x, &inputs.pad_mask)?;
    let pooled = g.dropout(pooled, config.dropout, training, rng)?;
    g.linear(pooled, p.var("head/cnn/w")?, p.var("head/cnn/b")?)
}

pub fn gcn_forward<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &HeadConfig,
    h: Var,
    inputs: &HeadInputs<T>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_hidden(g, h, config, inputs)?;
    let adj = inputs
        .adjacency
        .as_ref()
        .ok_or_else(|| AbsaError::Contract("gcn head needs a word graph".into()))?;
    if let Some(b) =
        (0..inputs.batch).find(|&b| !inputs.aspect_mask[b * inputs.len..(b + 1) * inputs.len].contains(&true))
    {
        return Err(AbsaError::Contract(format!("empty aspect mask (batch row {b})")));
    }
    let mut x = h;
    for i in 1..=config.gcn_layers {
        let m = g.propagate(adj.clone(), x)?;
        let m = g.matmul(m, p.var(&format!("head/gcn/w{i}"))?)?;
        x = g.relu(m)?;
    }
    let pooled = g.mean_pool_time(x, &weights(&inputs.aspect_mask))?;
    let pooled = g.dropout(pooled, config.dropout, training, rng)?;
    g.linear(pooled, p.var("head/gcn/w")?, p.var("head/gcn/b")?)
}

/// Dispatches on `config.kind`; returns `[B, 3]` logits.
pub fn forward<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &HeadConfig,
    h: Var,
    inputs: &HeadInputs<T>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    match config.kind {
        HeadKind::Fcn => fcn_forward(g, p, config, h, inputs, training, rng),
        HeadKind::Cnn => cnn_forward(g, p, config, h, inputs, training, rng),
        HeadKind::Gcn => gcn_forward(g, p, config, h, inputs, training, rng),
    }
}

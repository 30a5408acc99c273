use std::fs;
use std::path::{Path, PathBuf};

use absa_core::checkpoint::Checkpoint;
use absa_core::dataset::{
    corpus_stats, generate_synthetic, load_jsonl, stratified_split, write_jsonl, Example, Polarity,
};
use absa_core::encoder::{EncoderConfig, PrecomputedEmbeddings};
use absa_core::evaluation::evaluate as score;
use absa_core::experiment::{run_experiment, ExperimentData, ExperimentSpec};
use absa_core::heads::HeadKind;
use absa_core::model::{encode_samples, Batch, EncoderSpec, Model, ModelConfig, Sample};
use absa_core::tokenizer::{encode, Vocab};
use absa_core::training::{train_with_progress, DataSplit};
use absa_core::{AbsaError, Result};
use anyhow::Context;
use serde::Serialize;

use crate::config::{RunConfig, PRECOMPUTED};
use crate::{EvaluateArgs, ExperimentArgs, GenerateArgs, PredictArgs, PrepareArgs, RunArgs, StatsArgs, TrainArgs};

const SPLITS: [&str; 3] = ["train", "val", "test"];
const VOCAB_FILE: &str = "vocab.txt";

pub fn generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let examples = generate_synthetic(args.n, args.vocab_size, args.seed);
    write_jsonl(&args.out, &examples)?;
    println!("wrote {} examples to {}", examples.len(), args.out.display());
    Ok(())
}

pub fn prepare(args: &PrepareArgs) -> anyhow::Result<()> {
    let mut config = args.config.load()?;
    let split = &mut config.split;
    if let Some(v) = args.train_frac {
        split.train = v;
    }
    if let Some(v) = args.val_frac {
        split.val = v;
    }
    if let Some(v) = args.test_frac {
        split.test = v;
    }
    if let Some(v) = args.split_seed {
        split.seed = v;
    }
    if args.no_stratify {
        split.stratify = false;
    }
    let min_freq = args.min_freq.unwrap_or(config.model.min_freq);
    let data = args
        .data
        .clone()
        .or(config.paths.data.clone())
        .ok_or_else(|| AbsaError::Config("no input corpus: pass --data or set paths.data".into()))?;
    let out = args.out.clone().unwrap_or(config.paths.prepared.clone());

    let examples = load_jsonl(&data).with_context(|| format!("reading {}", data.display()))?;
    let parts = stratified_split(&examples, &config.split)?;
    let vocab = Vocab::from_examples(&parts.train, min_freq)?;
    fs::create_dir_all(&out).map_err(|e| AbsaError::io(&out, e))?;
    for (name, part) in SPLITS.iter().zip([&parts.train, &parts.val, &parts.test]) {
        write_jsonl(out.join(format!("{name}.jsonl")), part)?;
    }
    vocab.save(out.join(VOCAB_FILE))?;
    println!(
        "train {} / val {} / test {} examples, vocabulary {} entries, written to {}",
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

pub fn stats(args: &StatsArgs) -> anyhow::Result<()> {
    if args.bin_width == 0 {
        return Err(AbsaError::Config("bin width must be positive".into()).into());
    }
    let examples = load_jsonl(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let report = serde_json::to_string_pretty(&corpus_stats(&examples, args.bin_width))? + "\n";
    match &args.out {
        Some(path) => fs::write(path, report).map_err(|e| AbsaError::io(path, e))?,
        None => print!("{report}"),
    }
    Ok(())
}

/// Applies the shared run flags on top of the config file.
fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut c = args.config.load()?;
    if let Some(v) = &args.prepared {
        c.paths.prepared = v.clone();
    }
    if let Some(v) = &args.features {
        c.paths.features = Some(v.clone());
    }
    if let Some(v) = args.max_len {
        c.model.max_len = v;
    }
    let t = &mut c.train;
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.dropout {
        t.dropout = v;
    }
    if let Some(v) = args.patience {
        t.patience = Some(v);
    }
    if args.no_early_stop {
        t.patience = None;
    }
    if let Some(v) = args.metric {
        t.metric = v.into();
    }
    if let Some(v) = args.warmup_steps {
        t.warmup_steps = v;
    }
    Ok(c)
}

struct Prepared {
    vocab: Vocab,
    splits: [Vec<Sample>; 3],
    features: Option<[PrecomputedEmbeddings<f32>; 3]>,
}

impl Prepared {
    fn load(config: &RunConfig, need_features: bool) -> Result<Self> {
        let dir = &config.paths.prepared;
        let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
        let mut splits: [Vec<Sample>; 3] = Default::default();
        for (slot, name) in splits.iter_mut().zip(SPLITS) {
            let examples = load_jsonl(dir.join(format!("{name}.jsonl")))?;
            *slot = encode_samples(&examples, &vocab, config.model.max_len)?;
        }
        let features = if need_features {
            let dir = config.paths.features.as_ref().ok_or_else(|| {
                AbsaError::Config("the precomputed encoder needs paths.features or --features".into())
            })?;
            let [a, b, c] = SPLITS.map(|name| load_features(&dir.join(format!("{name}.emb"))));
            Some([a?, b?, c?])
        } else {
            None
        };
        Ok(Prepared {
            vocab,
            splits,
            features,
        })
    }

    fn split(&self, i: usize) -> DataSplit<'_, f32> {
        match &self.features {
            Some(f) => DataSplit::with_features(&self.splits[i], &f[i]),
            None => DataSplit::new(&self.splits[i]),
        }
    }

    fn features_hidden(&self) -> Option<usize> {
        self.features.as_ref().map(|f| f[0].hidden())
    }
}

/// Loads an embedding file, taking the hidden size from its first tensor.
fn load_features(path: &Path) -> Result<PrecomputedEmbeddings<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    let hidden = ck.tensors.iter().next().map(|(_, t)| t.last_dim()).unwrap_or(0);
    PrecomputedEmbeddings::from_store(ck.tensors, hidden)
}

fn encoder_spec(
    preset: &str,
    config: &RunConfig,
    vocab: &Vocab,
    features_hidden: Option<usize>,
) -> Result<EncoderSpec> {
    if preset == PRECOMPUTED {
        let hidden = features_hidden.ok_or_else(|| AbsaError::Config("no precomputed features loaded".into()))?;
        return Ok(EncoderSpec::Precomputed {
            name: PRECOMPUTED.into(),
            hidden,
        });
    }
    Ok(EncoderSpec::Transformer(EncoderConfig {
        vocab_size: vocab.len(),
        max_len: config.model.max_len,
        dropout: config.train.dropout,
        ..EncoderConfig::preset(preset)?
    }))
}

fn model_config(kind: HeadKind, encoder: EncoderSpec, config: &RunConfig) -> ModelConfig {
    let head = config.head.config(kind, encoder.hidden(), config.train.dropout);
    ModelConfig { encoder, head }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AbsaError::io(dir, e))?;
    }
    fs::write(path, content).map_err(|e| AbsaError::io(path, e))
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = run_config(&args.run)?;
    if let Some(v) = &args.preset {
        config.model.preset = v.clone();
    }
    if let Some(v) = args.head {
        config.model.head = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = &args.checkpoint {
        config.paths.checkpoint = v.clone();
    }
    if let Some(v) = &args.history {
        config.paths.history = v.clone();
    }
    config.validate()?;
    let data = Prepared::load(&config, config.model.preset == PRECOMPUTED)?;
    let encoder = encoder_spec(&config.model.preset, &config, &data.vocab, data.features_hidden())?;
    let mc = model_config(config.model.head, encoder, &config);
    mc.validate()?;
    println!(
        "training {} head on {} encoder: {} train / {} val examples, seed {}",
        mc.head.kind.label(),
        mc.encoder.name(),
        data.splits[0].len(),
        data.splits[1].len(),
        config.train.seed
    );
    let epochs = config.train.epochs;
    let outcome = train_with_progress(&mc, &config.train, data.split(0), data.split(1), &mut |r| {
        println!(
            "epoch {}/{epochs}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  val_f1 {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.val_macro_f1
        )
    })?;
    let h = &outcome.history;
    println!(
        "best epoch {} of {} ({:?})",
        h.best_epoch,
        h.epochs.len(),
        h.stop_reason
    );
    let ck = outcome
        .model
        .to_checkpoint()?
        .with_meta("vocab", &data.vocab.to_text())?
        .with_meta("max_len", &config.model.max_len)?;
    if let Some(dir) = config.paths.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AbsaError::io(dir, e))?;
    }
    ck.save(&config.paths.checkpoint)?;
    write_file(&config.paths.history, &(serde_json::to_string_pretty(h)? + "\n"))?;
    println!(
        "checkpoint {}  history {}",
        config.paths.checkpoint.display(),
        config.paths.history.display()
    );
    Ok(())
}

pub fn experiment(args: &ExperimentArgs) -> anyhow::Result<()> {
    let mut config = run_config(&args.run)?;
    let e = &mut config.experiment;
    if let Some(v) = &args.heads {
        e.heads = v.clone();
    }
    if let Some(v) = &args.presets {
        e.presets = v.clone();
    }
    if let Some(v) = &args.seeds {
        e.seeds = v.clone();
    }
    if let Some(v) = &args.reports {
        config.paths.reports = v.clone();
    }
    config.validate()?;
    let e = &config.experiment;
    let data = Prepared::load(&config, e.presets.iter().any(|p| p == PRECOMPUTED))?;
    let encoders = e
        .presets
        .iter()
        .map(|p| encoder_spec(p, &config, &data.vocab, data.features_hidden()))
        .collect::<Result<Vec<_>>>()?;
    let spec = ExperimentSpec {
        heads: e.heads.clone(),
        encoders,
        seeds: e.seeds.clone(),
        train: config.train.clone(),
        head: config.head.config(HeadKind::Fcn, 0, config.train.dropout),
    };
    let exp_data = ExperimentData {
        train: data.split(0),
        val: data.split(1),
        test: data.split(2),
    };
    let report = run_experiment(&spec, &exp_data, &config.paths.reports, &mut |m| println!("{m}"))?;
    print!("{}", report.to_text());
    println!("reports written to {}", config.paths.reports.display());
    Ok(())
}

/// Model, vocabulary and maximum length stored in a `train` checkpoint.
fn load_trained(path: &Path) -> anyhow::Result<(Model<f32>, Vocab, usize)> {
    let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
    let vocab: String = ck
        .meta_value("vocab")
        .with_context(|| format!("{} has no vocabulary; was it written by `absa train`?", path.display()))?;
    let vocab = Vocab::from_text(&vocab)?;
    let max_len: usize = ck.meta_value("max_len")?;
    Ok((Model::from_checkpoint(ck)?, vocab, max_len))
}

pub fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let config = args.config.load()?;
    let checkpoint = args.checkpoint.clone().unwrap_or(config.paths.checkpoint.clone());
    let (model, vocab, max_len) = load_trained(&checkpoint)?;
    let prepared = args.prepared.clone().unwrap_or(config.paths.prepared.clone());
    let data = args
        .data
        .clone()
        .unwrap_or_else(|| prepared.join(format!("{}.jsonl", args.split.name())));
    let examples = load_jsonl(&data).with_context(|| format!("reading {}", data.display()))?;
    let samples = encode_samples(&examples, &vocab, max_len)?;
    let features = if model.config.encoder.is_precomputed() {
        let path: PathBuf = match (args.features.clone().or(config.paths.features.clone()), &args.data) {
            (Some(p), _) if p.is_file() => p,
            (Some(dir), None) => dir.join(format!("{}.emb", args.split.name())),
            _ => {
                return Err(AbsaError::Config(
                    "a precomputed-encoder checkpoint needs --features with the embedding file".into(),
                )
                .into())
            }
        };
        Some(load_features(&path).with_context(|| format!("loading {}", path.display()))?)
    } else {
        None
    };
    let metrics = score(&model, &samples, features.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    aspect: String,
    label: &'static str,
    probabilities: Vec<(&'static str, f64)>,
}

/// Character span of the first occurrence of `aspect` in `text`.
fn find_aspect(text: &str, aspect: &str) -> Result<(usize, usize)> {
    let byte = text.find(aspect).ok_or_else(|| AbsaError::Validation {
        index: 0,
        line: 0,
        message: format!("aspect {aspect:?} does not occur in the text"),
    })?;
    let start = text[..byte].chars().count();
    Ok((start, start + aspect.chars().count()))
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let (model, vocab, max_len) = load_trained(&args.checkpoint)?;
    if model.config.encoder.is_precomputed() {
        return Err(AbsaError::Config("predict needs a checkpoint with a transformer encoder".into()).into());
    }
    let (start, end) = match (&args.aspect, args.span) {
        (_, Some(span)) => span,
        (Some(aspect), None) => find_aspect(&args.text, aspect)?,
        (None, None) => unreachable!("clap requires --aspect or --span"),
    };
    let example = Example::from_span(&args.text, start, end, Polarity::Neutral)?;
    let sample = Sample {
        input: encode(&example, &vocab, max_len)?,
        label: 0,
        key: String::new(),
    };
    let batch = Batch::new(&[&sample], &model.config, None)?;
    let probs: Vec<f64> = model.predict_proba(&batch)?.data().iter().map(|&p| p as f64).collect();
    let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    let name = |i: usize| Polarity::from_index(i).map(Polarity::name).unwrap_or("?");
    let out = Prediction {
        aspect: example.aspect.clone(),
        label: name(best),
        probabilities: probs.iter().enumerate().map(|(i, &p)| (name(i), p)).collect(),
    };
    if args.json {
        println!("{}", serde_json::to_string(&out)?);
    } else {
        println!("aspect: {}", out.aspect);
        println!("label: {}", out.label);
        for (label, p) in &out.probabilities {
            println!("{label:<8} {p:.6}");
        }
    }
    Ok(())
}

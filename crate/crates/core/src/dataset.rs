//! Labeled (sentence, aspect) examples: JSON-lines ingestion, stratified
//! splitting, corpus statistics and a synthetic corpus generator.
//!
//! Aspect spans are half-open character offsets (Unicode scalar values, not
//! bytes) into `text`. A tweet with several aspects is stored as several
//! examples, one per (sentence, aspect) pair.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AbsaError, Result};

/// Sentiment toward an aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negative" | "neg" => Some(Polarity::Negative),
            "neutral" | "neu" => Some(Polarity::Neutral),
            "positive" | "pos" => Some(Polarity::Positive),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Polarity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Polarity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Index(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) => Polarity::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown label {s:?}"))),
            Raw::Index(i) => Polarity::from_index(i as usize)
                .ok_or_else(|| serde::de::Error::custom(format!("label index {i} is outside 0..3"))),
        }
    }
}

/// One labeled (sentence, aspect) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub aspect: String,
    pub aspect_start: usize,
    pub aspect_end: usize,
    pub label: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Example {
    /// Builds an example from a character span, taking the aspect text from `text`.
    pub fn from_span(text: &str, start: usize, end: usize, label: Polarity) -> Result<Self> {
        let ex = Example {
            text: text.to_string(),
            aspect: char_slice(text, start, end).unwrap_or_default(),
            aspect_start: start,
            aspect_end: end,
            label,
            category: None,
        };
        ex.validate().map_err(|m| AbsaError::Validation {
            index: 0,
            line: 0,
            message: m,
        })?;
        Ok(ex)
    }

    /// Checks the span invariant; returns a description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let len = self.text.chars().count();
        if self.aspect_start >= self.aspect_end {
            return Err(format!(
                "empty or inverted aspect span [{}, {})",
                self.aspect_start, self.aspect_end
            ));
        }
        if self.aspect_end > len {
            return Err(format!(
                "aspect span [{}, {}) exceeds text length {len}",
                self.aspect_start, self.aspect_end
            ));
        }
        let span = char_slice(&self.text, self.aspect_start, self.aspect_end).unwrap_or_default();
        if span != self.aspect {
            return Err(format!("span text {span:?} does not match aspect {:?}", self.aspect));
        }
        Ok(())
    }
}

fn char_slice(text: &str, start: usize, end: usize) -> Option<String> {
    if start > end || end > text.chars().count() {
        return None;
    }
    Some(text.chars().skip(start).take(end - start).collect())
}

/// Parses JSON-lines content. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(content: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| AbsaError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|message| AbsaError::Validation {
            index: out.len(),
            line: line_no,
            message,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| AbsaError::io(path, e))?;
    parse_jsonl(&content)
}

pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(examples)?).map_err(|e| AbsaError::io(path, e))
}

/// Split fractions and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub stratify: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    /// 70% train, 15% validation, 15% test.
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            stratify: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(AbsaError::Config(format!(
                "split fractions must be positive, got {f:?}"
            )));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AbsaError::Config(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Sizes for one group: each split gets at least one member.
fn allocate(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let mut tr = ((n as f64) * spec.train).round() as usize;
    let mut va = ((n as f64) * spec.val).round() as usize;
    tr = tr.clamp(1, n);
    va = va.max(1);
    while tr + va + 1 > n {
        if tr >= va && tr > 1 {
            tr -= 1;
        } else {
            va -= 1;
        }
    }
    (tr, va, n - tr - va)
}

/// Seeded split; with `stratify`, label proportions are preserved per split.
pub fn stratified_split(examples: &[Example], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let groups: Vec<Vec<usize>> = if spec.stratify {
        Polarity::ALL
            .iter()
            .map(|&p| (0..examples.len()).filter(|&i| examples[i].label == p).collect())
            .collect()
    } else {
        vec![(0..examples.len()).collect()]
    };
    for (g, members) in groups.iter().enumerate() {
        if members.len() < 3 {
            let what = if spec.stratify {
                format!("label {}", Polarity::ALL[g])
            } else {
                "corpus".to_string()
            };
            return Err(AbsaError::Stratification(format!(
                "{what} has {} example(s); at least 3 are needed for three non-empty splits",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for mut members in groups {
        members.shuffle(&mut rng);
        let (a, b, _) = allocate(members.len(), spec);
        tr.extend_from_slice(&members[..a]);
        va.extend_from_slice(&members[a..a + b]);
        te.extend_from_slice(&members[a + b..]);
    }
    let pick = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        idx.into_iter().map(|i| examples[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        train: pick(tr),
        val: pick(va),
        test: pick(te),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub start: usize,
    pub end: usize,
    pub count: usize,
}

/// Corpus summary: label and category counts plus a whitespace-word
/// length histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total: usize,
    pub labels: BTreeMap<String, usize>,
    pub categories: BTreeMap<String, usize>,
    pub uncategorized: usize,
    pub bin_width: usize,
    pub length_histogram: Vec<HistogramBin>,
    pub min_words: usize,
    pub max_words: usize,
    pub mean_words: f64,
}

pub fn corpus_stats(examples: &[Example], bin_width: usize) -> StatsReport {
    let bin_width = bin_width.max(1);
    let mut labels: BTreeMap<String, usize> = Polarity::ALL.iter().map(|p| (p.name().to_string(), 0)).collect();
    let mut categories = BTreeMap::new();
    let mut uncategorized = 0;
    let lengths: Vec<usize> = examples.iter().map(|e| e.text.split_whitespace().count()).collect();
    for ex in examples {
        *labels.get_mut(ex.label.name()).unwrap() += 1;
        match &ex.category {
            Some(c) => *categories.entry(c.clone()).or_insert(0) += 1,
            None => uncategorized += 1,
        }
    }
    let max = lengths.iter().copied().max().unwrap_or(0);
    let min = lengths.iter().copied().min().unwrap_or(0);
    let mut length_histogram = Vec::new();
    if !lengths.is_empty() {
        let bins = max / bin_width + 1;
        length_histogram = (0..bins)
            .map(|b| HistogramBin {
                start: b * bin_width,
                end: (b + 1) * bin_width,
                count: 0,
            })
            .collect();
        for &l in &lengths {
            length_histogram[l / bin_width].count += 1;
        }
    }
    let total_words: usize = lengths.iter().sum();
    StatsReport {
        total: examples.len(),
        labels,
        categories,
        uncategorized,
        bin_width,
        length_histogram,
        min_words: min,
        max_words: max,
        mean_words: if examples.is_empty() {
            0.0
        } else {
            total_words as f64 / examples.len() as f64
        },
    }
}

/// Aspect terms and their categories used by the synthetic generator.
pub const SYNTHETIC_ASPECTS: &[(&str, &str)] = &[
    ("vaccine", "Vaccine"),
    ("pfizer vaccine", "Vaccine"),
    ("moderna", "Vaccine"),
    ("booster shot", "Vaccine"),
    ("remdesivir", "Drug"),
    ("ivermectin", "Drug"),
    ("paxlovid", "Drug"),
    ("dr fauci", "Person"),
    ("the governor", "Person"),
    ("nurse", "Person"),
    ("cdc", "Organization"),
    ("nhs", "Organization"),
    ("health ministry", "Organization"),
];

/// Polarity-bearing cue words, indexed by label.
pub const SYNTHETIC_CUES: [&[&str]; 3] = [
    &["terrible", "awful", "dangerous", "useless", "horrible", "worst"],
    &["mentioned", "discussed", "reported", "scheduled", "listed", "noted"],
    &["great", "excellent", "effective", "helpful", "wonderful", "best"],
];

const SYLLABLES: [&str; 10] = ["ba", "ko", "mi", "te", "ru", "sa", "lo", "ne", "di", "fu"];

/// Deterministic filler word for index `i`.
pub fn filler_word(i: usize) -> String {
    let mut n = i + 10;
    let mut parts = Vec::new();
    while n > 0 {
        parts.push(SYLLABLES[n % 10]);
        n /= 10;
    }
    parts.concat()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Probability of negative, neutral, positive.
    pub mixture: [f64; 3],
    pub min_words: usize,
    pub max_words: usize,
    /// Maximum token distance between the cue word and the aspect.
    pub cue_window: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 200,
            mixture: [1.0 / 3.0; 3],
            min_words: 6,
            max_words: 16,
            cue_window: 3,
        }
    }
}

/// Synthetic corpus with the default shape and `vocab_size` filler words.
pub fn generate_synthetic(n: usize, vocab_size: usize, seed: u64) -> Vec<Example> {
    let config = SyntheticConfig {
        vocab_size: vocab_size.max(1),
        ..SyntheticConfig::default()
    };
    generate_synthetic_with(&config, n, seed)
}

/// Each sentence holds one aspect term and one cue word at token distance
/// `1..=cue_window` from it; the label is the cue word's class.
pub fn generate_synthetic_with(config: &SyntheticConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = config.mixture.iter().sum();
    let window = config.cue_window.max(1);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let &(aspect, category) = SYNTHETIC_ASPECTS.choose(&mut rng).unwrap();
        let aspect_words: Vec<&str> = aspect.split(' ').collect();
        let alen = aspect_words.len();

        let mut r = rng.gen::<f64>() * total;
        let mut label = 2;
        for (i, &w) in config.mixture.iter().enumerate() {
            if r < w {
                label = i;
                break;
            }
            r -= w;
        }
        let cue = *SYNTHETIC_CUES[label].choose(&mut rng).unwrap();

        let lo = config.min_words.max(alen + 1);
        let hi = config.max_words.max(lo);
        let len = rng.gen_range(lo..=hi);
        let start = rng.gen_range(0..=len - alen);
        let candidates: Vec<usize> = (1..=window)
            .flat_map(|d| {
                let before = start.checked_sub(d);
                let after = Some(start + alen - 1 + d).filter(|&p| p < len);
                [before, after]
            })
            .flatten()
            .collect();
        let cue_pos = *candidates.choose(&mut rng).unwrap();

        let mut words: Vec<String> = (0..len)
            .map(|_| filler_word(rng.gen_range(0..config.vocab_size.max(1))))
            .collect();
        for (k, w) in aspect_words.iter().enumerate() {
            words[start + k] = (*w).to_string();
        }
        words[cue_pos] = cue.to_string();

        let prefix: usize = words[..start].iter().map(|w| w.chars().count() + 1).sum();
        let text = words.join(" ");
        out.push(Example {
            text,
            aspect: aspect.to_string(),
            aspect_start: prefix,
            aspect_end: prefix + aspect.chars().count(),
            label: Polarity::from_index(label).unwrap(),
            category: Some(category.to_string()),
        });
    }
    out
}

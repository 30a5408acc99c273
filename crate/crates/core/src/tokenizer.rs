//! Word-level vocabulary and sentence/aspect pair encoding.
//!
//! Encoded layout: `[CLS] sentence [SEP] aspect [SEP] [PAD]...`. Segment ids
//! are 0 up to and including the first `[SEP]` and 1 from the aspect tokens
//! through the second `[SEP]`. `aspect_mask` marks the sentence positions
//! whose character spans intersect the aspect span.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{AbsaError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const DEFAULT_MAX_LEN: usize = 64;
const VOCAB_HEADER: &str = "#absa-vocab";
const VOCAB_VERSION: u32 = 1;

/// A lowercased token with its character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits on whitespace; runs of word characters form one token and every
/// other character is a token by itself.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let flush = |word: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        if !word.is_empty() {
            out.push(Token {
                text: word.to_lowercase(),
                start,
                end,
            });
            word.clear();
        }
    };
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if is_word_char(c) {
            if word.is_empty() {
                word_start = i;
            }
            word.push(c);
            continue;
        }
        flush(&mut word, word_start, i, &mut out);
        if !c.is_whitespace() {
            out.push(Token {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        }
    }
    flush(&mut word, word_start, n, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_freq: usize,
}

impl Vocab {
    /// Tokens occurring at least `min_freq` times, ordered by frequency
    /// (descending) then lexicographically, after the reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok.text).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(AbsaError::Config(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_freq))
    }

    pub fn from_examples(examples: &[Example], min_freq: usize) -> Result<Self> {
        Self::build(examples.iter().map(|e| e.text.as_str()), min_freq)
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{VOCAB_HEADER}\tversion={VOCAB_VERSION}\tmin_freq={}\tsize={}\n",
            self.min_freq,
            self.len()
        );
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{t}\t{i}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |line: usize, message: String| AbsaError::Parse { line, message };
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.first() != Some(&VOCAB_HEADER) {
            return Err(bad(1, format!("unrecognized header {header:?}")));
        }
        let mut settings = HashMap::new();
        for f in &fields[1..] {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| bad(1, format!("bad header field {f:?}")))?;
            settings.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            settings
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(1, format!("header lacks a numeric {key}")))
        };
        if num("version")? != VOCAB_VERSION as usize {
            return Err(bad(1, "unsupported vocabulary version".into()));
        }
        let (min_freq, size) = (num("min_freq")?, num("size")?);
        let mut tokens = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(i + 2, format!("expected token<TAB>id, got {line:?}")))?;
            if id.parse::<usize>().ok() != Some(tokens.len()) {
                return Err(bad(i + 2, format!("ids must be dense and ordered, got {id:?}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() != size || tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(bad(1, "size or reserved tokens do not match".into()));
        }
        Ok(Self::from_tokens(tokens, min_freq))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| AbsaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AbsaError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Fixed-length pair encoding of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub segment: Vec<u8>,
    pub aspect_mask: Vec<u8>,
    pub pad_mask: Vec<u8>,
    /// Sentence tokens kept (positions `1..=sentence_len`).
    pub sentence_len: usize,
    /// Aspect-segment tokens.
    pub aspect_len: usize,
}

impl EncodedInput {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        3 + self.sentence_len + self.aspect_len
    }

    /// Sentence positions in the encoded layout.
    pub fn sentence_positions(&self) -> std::ops::Range<usize> {
        1..1 + self.sentence_len
    }
}

/// Encodes an example to length `max_len`.
///
/// When the sequence does not fit, the aspect tokens (in the sentence and in
/// the aspect segment) are always kept; right context is kept next, nearest
/// tokens first, and left context gets whatever room remains.
pub fn encode(example: &Example, vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    let sentence = tokenize(&example.text);
    let aspect_tokens = tokenize(&example.aspect);
    let hits: Vec<usize> = sentence
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < example.aspect_end && t.end > example.aspect_start)
        .map(|(i, _)| i)
        .collect();
    let (Some(&a0), Some(&a1)) = (hits.first(), hits.last()) else {
        return Err(AbsaError::Encoding(format!(
            "aspect span [{}, {}) covers no token of {:?}",
            example.aspect_start, example.aspect_end, example.text
        )));
    };
    if aspect_tokens.is_empty() {
        return Err(AbsaError::Encoding(format!(
            "aspect {:?} has no tokens",
            example.aspect
        )));
    }
    let budget = max_len.saturating_sub(3);
    let core = (a1 - a0 + 1) + aspect_tokens.len();
    if max_len < 3 || core > budget {
        return Err(AbsaError::Encoding(format!(
            "max length {max_len} cannot hold the aspect ({core} tokens plus 3 markers)"
        )));
    }
    let mut room = budget - core;
    let right = (sentence.len() - a1 - 1).min(room);
    room -= right;
    let left = a0.min(room);
    let kept = &sentence[a0 - left..=a1 + right];

    let mut ids = Vec::with_capacity(max_len);
    let mut segment = Vec::with_capacity(max_len);
    let mut aspect_mask = Vec::with_capacity(max_len);
    ids.push(CLS);
    segment.push(0);
    aspect_mask.push(0);
    for (k, tok) in kept.iter().enumerate() {
        let idx = a0 - left + k;
        ids.push(vocab.id(&tok.text));
        segment.push(0);
        aspect_mask.push(u8::from((a0..=a1).contains(&idx)));
    }
    ids.push(SEP);
    segment.push(0);
    aspect_mask.push(0);
    for tok in &aspect_tokens {
        ids.push(vocab.id(&tok.text));
        segment.push(1);
        aspect_mask.push(0);
    }
    ids.push(SEP);
    segment.push(1);
    aspect_mask.push(0);
    let real = ids.len();
    ids.resize(max_len, PAD);
    segment.resize(max_len, 0);
    aspect_mask.resize(max_len, 0);
    let pad_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(EncodedInput {
        ids,
        segment,
        aspect_mask,
        pad_mask,
        sentence_len: kept.len(),
        aspect_len: aspect_tokens.len(),
    })
}

/// Sentence tokens of an encoding, as vocabulary strings.
pub fn decode(encoded: &EncodedInput, vocab: &Vocab) -> Vec<String> {
    encoded.ids[encoded.sentence_positions()]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(RESERVED[UNK as usize]).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Polarity};
    use proptest::prelude::*;

    fn ex(text: &str, start: usize, end: usize) -> Example {
        Example::from_span(text, start, end, Polarity::Neutral).unwrap()
    }

    #[test]
    fn tokenize_spans() {
        let toks = tokenize("Hi, @Bob's  day!");
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["hi", ",", "@", "bob", "'", "s", "day", "!"]);
        assert_eq!((toks[3].start, toks[3].end), (5, 8));
        assert_eq!((toks[6].start, toks[6].end), (12, 15));
    }

    #[test]
    fn vocab_ordering_and_threshold() {
        let v = Vocab::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
        let v = Vocab::build(["a b", "a"], 3).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (UNK, UNK));
        assert_eq!(v.len(), 4);
        let ties = Vocab::build(["z y x", "y"], 1).unwrap();
        assert_eq!((ties.id("y"), ties.id("x"), ties.id("z")), (4, 5, 6));
        assert_eq!(
            Vocab::build(["a b", "a"], 1).unwrap(),
            Vocab::build(["a b", "a"], 1).unwrap()
        );
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert!(matches!(Vocab::build(Vec::<&str>::new(), 1), Err(AbsaError::Config(_))));
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::from_examples(&generate_synthetic(50, 30, 1), 2).unwrap();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(text.starts_with("#absa-vocab\tversion=1\tmin_freq=2\t"));
    }

    #[test]
    fn encode_hand_case() {
        let v = Vocab::build(["good vaccine today"], 1).unwrap();
        let e = encode(&ex("good vaccine today", 5, 12), &v, 10).unwrap();
        let (g, vac, t) = (v.id("good"), v.id("vaccine"), v.id("today"));
        assert_eq!(e.ids, vec![CLS, g, vac, t, SEP, vac, SEP, PAD, PAD, PAD]);
        assert_eq!(e.aspect_mask, vec![0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(e.segment, vec![0, 0, 0, 0, 0, 1, 1, 0, 0, 0]);
        assert_eq!(e.pad_mask, vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn whole_sentence_aspect() {
        let v = Vocab::build(["mask mandate"], 1).unwrap();
        let e = encode(&ex("mask mandate", 0, 12), &v, 8).unwrap();
        let sentence: Vec<u8> = e.pad_mask[e.sentence_positions()].to_vec();
        assert_eq!(e.aspect_mask[e.sentence_positions()], sentence[..]);
        assert_eq!(e.aspect_mask.iter().map(|&m| m as usize).sum::<usize>(), 2);
    }

    #[test]
    fn truncation_drops_left_context_first() {
        let text = "l1 l2 l3 l4 aspect r1 r2";
        let v = Vocab::build([text], 1).unwrap();
        // room: 9 - 3 - (1 + 1) = 4 -> r1 r2 kept, then l3 l4
        let e = encode(&ex(text, 12, 18), &v, 9).unwrap();
        assert_eq!(decode(&e, &v), ["l3", "l4", "aspect", "r1", "r2"]);
        // room 1 -> only r1 survives
        let e = encode(&ex(text, 12, 18), &v, 6).unwrap();
        assert_eq!(decode(&e, &v), ["aspect", "r1"]);
        assert_eq!(e.aspect_mask.iter().filter(|&&m| m == 1).count(), 1);
        // no room for the aspect itself
        assert!(matches!(encode(&ex(text, 12, 18), &v, 4), Err(AbsaError::Encoding(_))));
    }

    #[test]
    fn partial_word_span_marks_whole_token() {
        let v = Vocab::build(["vaccines work"], 1).unwrap();
        let e = encode(&ex("vaccines work", 0, 7), &v, 10).unwrap();
        assert_eq!(e.aspect_mask[1], 1);
        assert_eq!(e.aspect_mask[2], 0);
    }

    proptest! {
        #[test]
        fn encoding_invariants(seed in 0u64..500, max_len in 8usize..40) {
            let exs = generate_synthetic(4, 40, seed);
            let vocab = Vocab::from_examples(&exs, 1).unwrap();
            for x in &exs {
                let Ok(e) = encode(x, &vocab, max_len) else { continue };
                prop_assert_eq!(e.ids.len(), max_len);
                prop_assert_eq!(e.ids[0], CLS);
                prop_assert_eq!(e.ids[e.sentence_len + 1], SEP);
                prop_assert_eq!(e.ids[e.real_len() - 1], SEP);
                prop_assert!(e.aspect_mask.contains(&1));
                for i in 0..max_len {
                    let real = i < e.real_len();
                    prop_assert_eq!(e.pad_mask[i] == 1, real);
                    if !real {
                        prop_assert_eq!(e.aspect_mask[i], 0);
                        prop_assert_eq!(e.ids[i], PAD);
                    }
                    if i <= e.sentence_len + 1 {
                        prop_assert_eq!(e.segment[i], 0);
                    } else if real {
                        prop_assert_eq!(e.segment[i], 1);
                    }
                }
                prop_assert_eq!(&encode(x, &vocab, max_len).unwrap(), &e);
                if e.sentence_len == tokenize(&x.text).len() {
                    let expect: Vec<String> = tokenize(&x.text).into_iter().map(|t| t.text).collect();
                    prop_assert_eq!(decode(&e, &vocab), expect);
                }
            }
        }
    }
}

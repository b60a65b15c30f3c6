//! Character-level corpus, vocabulary and next-character batches.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Sorted-symbol vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut symbols: Vec<char> = text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self::from_symbols(symbols)
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Data(format!("symbol {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.symbols
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    /// JSON list of one-character strings.
    pub fn to_json(&self) -> String {
        let list: Vec<String> = self.symbols.iter().map(|c| c.to_string()).collect();
        serde_json::to_string(&list).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let list: Vec<String> =
            serde_json::from_str(text).map_err(|e| Error::format("vocabulary", e.to_string()))?;
        let mut symbols = Vec::with_capacity(list.len());
        for s in list {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(Error::format("vocabulary", format!("entry {s:?} is not one character"))),
            }
        }
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("vocabulary", "symbols must be sorted and distinct"));
        }
        Ok(Self::from_symbols(symbols))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_string(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    vocab: Vocab,
    tokens: Vec<usize>,
    splits: [Range<usize>; 3],
}

impl Corpus {
    /// `ratios` are the train/valid/test shares; boundaries are
    /// `round(n * r0)` and `round(n * (r0 + r1))`, the test split runs to
    /// `round(n * (r0 + r1 + r2))`.
    pub fn from_text(text: &str, ratios: [f64; 3]) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || sum > 1.0 + 1e-9 {
            return Err(Error::Data(format!("split ratios {ratios:?} must be in [0, 1] and sum to at most 1")));
        }
        let vocab = Vocab::from_text(text);
        let tokens = vocab.encode(text)?;
        let n = tokens.len() as f64;
        let b1 = (n * ratios[0]).round() as usize;
        let b2 = (n * (ratios[0] + ratios[1])).round() as usize;
        let b3 = ((n * sum).round() as usize).min(tokens.len());
        Ok(Self {
            vocab,
            tokens,
            splits: [0..b1, b1..b2, b2..b3],
        })
    }

    pub fn load(path: &Path, ratios: [f64; 3]) -> Result<Self> {
        Self::from_text(&crate::io::read_string(path)?, ratios)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        self.splits[split as usize].clone()
    }

    pub fn tokens(&self, split: Split) -> &[usize] {
        &self.tokens[self.range(split)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub seq_len: usize,
}

/// `batch_size` sequences of `seq_len` inputs and their next-character
/// targets, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Start offsets of the non-overlapping windows of a stream of `len`
/// tokens: `w * seq_len` for `w < floor((len - 1) / seq_len)`.
pub fn window_starts(len: usize, seq_len: usize) -> Vec<usize> {
    if seq_len == 0 || len < 2 {
        return Vec::new();
    }
    (0..(len - 1) / seq_len).map(|w| w * seq_len).collect()
}

/// Builds batches from a token stream. Windows are shuffled with the data
/// stream of `seed` (or kept in order when `seed` is `None`) and grouped;
/// a trailing partial batch is dropped.
pub fn batches_from_tokens(stream: &[usize], cfg: BatchConfig, seed: Option<u64>) -> Result<Vec<Batch>> {
    let BatchConfig { batch_size, seq_len } = cfg;
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Data("batch_size and seq_len must be positive".into()));
    }
    let need = batch_size * (seq_len + 1);
    if stream.len() < need {
        return Err(Error::Data(format!(
            "split has {} tokens but batch_size {batch_size} x (seq_len {seq_len} + 1) needs at least {need}",
            stream.len()
        )));
    }
    let mut starts = window_starts(stream.len(), seq_len);
    if let Some(seed) = seed {
        RngStream::new(seed, streams::DATA).shuffle(&mut starts);
    }
    Ok(starts
        .chunks_exact(batch_size)
        .map(|group| {
            let mut inputs = Vec::with_capacity(batch_size * seq_len);
            let mut targets = Vec::with_capacity(batch_size * seq_len);
            for &s in group {
                inputs.extend_from_slice(&stream[s..s + seq_len]);
                targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
            }
            Batch {
                inputs,
                targets,
                batch_size,
                seq_len,
            }
        })
        .collect())
}

pub fn batches(corpus: &Corpus, split: Split, cfg: BatchConfig, seed: u64) -> Result<Vec<Batch>> {
    batches_from_tokens(corpus.tokens(split), cfg, Some(seed))
}

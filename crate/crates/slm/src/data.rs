//! Dataset generation and ingestion: synthetic categorical sequences with
//! a known law, and a character-level corpus pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlmError};
use crate::rng;
use crate::types::SequenceBatch;

const PROB_SUM_TOL: f64 = 1e-12;

/// Law of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Independent draws per position from one categorical law.
    Iid { probs: Vec<f64> },
    /// First-order chain: initial law plus a row-stochastic transition.
    Markov {
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k: usize,
    pub l: usize,
    pub n: usize,
    #[serde(flatten)]
    pub law: SyntheticKind,
    pub seed: u64,
    /// Classes assigned uniformly at random; 0 means unlabeled data.
    #[serde(default)]
    pub class_count: usize,
}

fn check_simplex(probs: &[f64], k: usize) -> Result<()> {
    if probs.len() != k {
        return Err(SlmError::DimensionMismatch {
            left: probs.len(),
            right: k,
        });
    }
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(SlmError::InvalidProbability { value: p });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(SlmError::InvalidInput(format!(
            "probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn draw_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws N iid sequences from the spec's law. Deterministic given the
/// spec (including its seed).
pub fn generate(spec: &SyntheticSpec) -> Result<SequenceBatch> {
    match &spec.law {
        SyntheticKind::Iid { probs } => check_simplex(probs, spec.k)?,
        SyntheticKind::Markov {
            initial,
            transition,
        } => {
            check_simplex(initial, spec.k)?;
            if transition.len() != spec.k {
                return Err(SlmError::DimensionMismatch {
                    left: transition.len(),
                    right: spec.k,
                });
            }
            for row in transition {
                check_simplex(row, spec.k)?;
            }
        }
    }
    let mut r = rng::master(spec.seed);
    let mut tokens = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut seq = Vec::with_capacity(spec.l);
        match &spec.law {
            SyntheticKind::Iid { probs } => {
                for _ in 0..spec.l {
                    seq.push(draw_categorical(probs, &mut r));
                }
            }
            SyntheticKind::Markov {
                initial,
                transition,
            } => {
                let mut state = draw_categorical(initial, &mut r);
                seq.push(state);
                for _ in 1..spec.l {
                    state = draw_categorical(&transition[state], &mut r);
                    seq.push(state);
                }
            }
        }
        tokens.push(seq);
    }
    let labels = if spec.class_count > 0 {
        Some(
            (0..spec.n)
                .map(|_| r.gen_range(0..spec.class_count))
                .collect(),
        )
    } else {
        None
    };
    SequenceBatch::new(tokens, labels, spec.k, spec.class_count)
}

/// Character alphabet with a fixed index order. The default is 'a'..'z'
/// followed by space at index 26 (K = 27).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.push(' ');
        Self { chars }
    }
}

impl Alphabet {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(SlmError::InvalidInput("empty alphabet".into()));
        }
        Ok(Self { chars })
    }

    pub fn k(&self) -> usize {
        self.chars.len()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&a| a == c)
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        self.chars.get(index).copied()
    }

    /// Maps corpus bytes to indices; an out-of-alphabet byte is rejected
    /// with its offset.
    pub fn tokenize(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        bytes
            .iter()
            .enumerate()
            .map(|(offset, &b)| {
                self.index_of(b as char)
                    .ok_or(SlmError::OutOfAlphabet { byte: b, offset })
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.char_at(t).ok_or(SlmError::IndexOutOfRange {
                    index: t,
                    k: self.k(),
                })
            })
            .collect()
    }
}

/// Byte ranges of the train/valid/test splits within a corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_end: usize,
    pub valid_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A tokenized corpus region plus its chunking rules.
#[derive(Debug, Clone)]
pub struct CharCorpus {
    tokens: Vec<usize>,
    alphabet: Alphabet,
    chunk_length: usize,
}

impl CharCorpus {
    /// Tokenizes one split of a raw byte corpus.
    pub fn from_bytes(
        bytes: &[u8],
        alphabet: Alphabet,
        chunk_length: usize,
        splits: Splits,
        split: Split,
    ) -> Result<Self> {
        if chunk_length == 0 {
            return Err(SlmError::InvalidInput("chunk length must be >= 1".into()));
        }
        if splits.train_end > splits.valid_end || splits.valid_end > bytes.len() {
            return Err(SlmError::InvalidInput(format!(
                "split offsets ({}, {}) out of order for a {}-byte corpus",
                splits.train_end,
                splits.valid_end,
                bytes.len()
            )));
        }
        let (start, end) = match split {
            Split::Train => (0, splits.train_end),
            Split::Valid => (splits.train_end, splits.valid_end),
            Split::Test => (splits.valid_end, bytes.len()),
        };
        // Tokenize the whole file so the reported error offset is absolute.
        let tokens = alphabet.tokenize(bytes)?;
        Ok(Self {
            tokens: tokens[start..end].to_vec(),
            alphabet,
            chunk_length,
        })
    }

    pub fn load(
        path: &std::path::Path,
        alphabet: Alphabet,
        chunk_length: usize,
        splits: Splits,
        split: Split,
    ) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, alphabet, chunk_length, splits, split)
    }

    pub fn k(&self) -> usize {
        self.alphabet.k()
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn len_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Sequential non-overlapping chunks; the ragged tail is dropped.
    /// Deterministic, used for evaluation.
    pub fn sequential_chunks(&self) -> impl Iterator<Item = &[usize]> {
        self.tokens.chunks_exact(self.chunk_length)
    }

    /// Seeded random-offset chunks, used for training.
    pub fn random_chunks<'a, R: Rng + 'a>(
        &'a self,
        rng: &'a mut R,
    ) -> Result<impl Iterator<Item = &'a [usize]> + 'a> {
        if self.tokens.len() < self.chunk_length {
            return Err(SlmError::InvalidInput(format!(
                "split holds {} tokens, shorter than one {}-token chunk",
                self.tokens.len(),
                self.chunk_length
            )));
        }
        let max_offset = self.tokens.len() - self.chunk_length;
        let chunk = self.chunk_length;
        let tokens = &self.tokens;
        Ok(std::iter::repeat_with(move || {
            let off = rng.gen_range(0..=max_offset);
            &tokens[off..off + chunk]
        }))
    }

    /// Collects `n` random training chunks into a batch.
    pub fn random_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<SequenceBatch> {
        let rows = self
            .random_chunks(rng)?
            .take(n)
            .map(<[usize]>::to_vec)
            .collect();
        SequenceBatch::new(rows, None, self.k(), 0)
    }

    /// Collects up to `max` sequential eval chunks into a batch.
    pub fn sequential_batch(&self, max: usize) -> Result<SequenceBatch> {
        let rows: Vec<Vec<usize>> = self
            .sequential_chunks()
            .take(max)
            .map(<[usize]>::to_vec)
            .collect();
        if rows.is_empty() {
            return Err(SlmError::InvalidInput(
                "split too short for a single chunk".into(),
            ));
        }
        SequenceBatch::new(rows, None, self.k(), 0)
    }
}

/// Empirical token entropy of one sequence, in nats: -sum p_k ln p_k with
/// p_k the within-sequence frequency. Lies in [0, ln K].
pub fn token_entropy(tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(SlmError::InvalidInput("empty sequence".into()));
    }
    // BTreeMap keeps the summation order fixed, which keeps the f64
    // result byte-reproducible across runs.
    let mut counts = std::collections::BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = tokens.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h + 0.0) // normalizes the -0.0 of single-symbol sequences

}

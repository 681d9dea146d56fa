//! Synthetic "ordered-pair" task, dataset files and batching.
//!
//! Every sequence starts with [`CLS`]; the label is 1 exactly when marker
//! [`MARKER_A`] appears before marker [`MARKER_B`] and both are present.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GrainError, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MARKER_A: u32 = 7;
pub const MARKER_B: u32 = 11;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub vocab: usize,
    pub classes: usize,
}

/// Labelling rule of the synthetic task.
pub fn ordered_pair_label(tokens: &[u32]) -> usize {
    let a = tokens.iter().position(|&t| t == MARKER_A);
    let b = tokens.iter().position(|&t| t == MARKER_B);
    match (a, b) {
        (Some(a), Some(b)) if a < b => 1,
        _ => 0,
    }
}

fn filler(rng: &mut ChaCha8Rng, vocab: usize) -> u32 {
    loop {
        let t = rng.random_range(2..vocab as u32);
        if t != MARKER_A && t != MARKER_B {
            return t;
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize, label: usize) -> Example {
    let len = rng.random_range((max_len / 2).max(4)..=max_len);
    let mut tokens: Vec<u32> = std::iter::once(CLS)
        .chain((1..len).map(|_| filler(rng, vocab)))
        .collect();
    let i = rng.random_range(1..len);
    let j = loop {
        let j = rng.random_range(1..len);
        if j != i {
            break j;
        }
    };
    let (first, second) = (i.min(j), i.max(j));
    if label == 1 {
        tokens[first] = MARKER_A;
        tokens[second] = MARKER_B;
    } else {
        match rng.random_range(0..6) {
            0..=3 => {
                tokens[first] = MARKER_B;
                tokens[second] = MARKER_A;
            }
            4 => tokens[first] = MARKER_A,
            _ => tokens[first] = MARKER_B,
        }
    }
    debug_assert_eq!(ordered_pair_label(&tokens), label);
    Example { tokens, label }
}

/// Generates disjoint, class-balanced train and dev splits. Labels alternate
/// 0, 1, 0, … so an even split size has a label mean of exactly 0.5.
pub fn gen_synthetic(
    vocab: usize,
    max_len: usize,
    train: usize,
    dev: usize,
    seed: u64,
) -> Result<Dataset> {
    if vocab < 16 || max_len < 8 {
        return Err(GrainError::Param(format!(
            "synthetic task needs vocab >= 16 and max_len >= 8, got {vocab} and {max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |count: usize, rng: &mut ChaCha8Rng| {
        (0..count)
            .map(|i| loop {
                let ex = sample(rng, vocab, max_len, i % 2);
                if seen.insert(ex.tokens.clone()) {
                    break ex;
                }
            })
            .collect::<Vec<_>>()
    };
    let train = draw(train, &mut rng);
    let dev = draw(dev, &mut rng);
    Ok(Dataset {
        train,
        dev,
        vocab,
        classes: 2,
    })
}

/// Parses `label<TAB>id id id …` records.
pub fn parse_examples(text: &str, vocab: usize, classes: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (label, ids) = raw.split_once('\t').ok_or_else(|| GrainError::Parse {
            line,
            msg: "expected label<TAB>tokens".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| GrainError::Parse {
            line,
            msg: format!("bad label {label:?}"),
        })?;
        if label >= classes {
            return Err(GrainError::Range {
                line,
                msg: format!("label {label} not below {classes} classes"),
            });
        }
        let tokens = ids
            .split_whitespace()
            .map(|s| {
                let id: u32 = s.parse().map_err(|_| GrainError::Parse {
                    line,
                    msg: format!("bad token id {s:?}"),
                })?;
                if id as usize >= vocab {
                    return Err(GrainError::Range {
                        line,
                        msg: format!("token id {id} not below vocabulary size {vocab}"),
                    });
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(GrainError::Parse {
                line,
                msg: "empty token sequence".into(),
            });
        }
        out.push(Example { tokens, label });
    }
    Ok(out)
}

pub fn load_examples(path: &Path, vocab: usize, classes: usize) -> Result<Vec<Example>> {
    parse_examples(&fs::read_to_string(path)?, vocab, classes)
}

pub fn format_examples(examples: &[Example]) -> String {
    let mut s = String::new();
    for ex in examples {
        let ids: Vec<String> = ex.tokens.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "{}\t{}", ex.label, ids.join(" "));
    }
    s
}

/// A padded batch laid out row-major as `batch × seq_len` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], seq_len: usize) -> Self {
        let mut tokens = Vec::with_capacity(examples.len() * seq_len);
        for ex in examples {
            let n = ex.tokens.len().min(seq_len);
            tokens.extend_from_slice(&ex.tokens[..n]);
            tokens.extend(std::iter::repeat_n(PAD, seq_len - n));
        }
        Self {
            tokens,
            batch: examples.len(),
            seq_len,
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn example_tokens(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Positions holding real tokens, as flat row indices.
    pub fn token_rows(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i] != PAD)
            .collect()
    }

    /// The same examples padded only to the longest one.
    pub fn trimmed(&self) -> Self {
        let longest = (0..self.batch)
            .map(|b| {
                self.example_tokens(b)
                    .iter()
                    .rposition(|&t| t != PAD)
                    .map_or(0, |p| p + 1)
            })
            .max()
            .unwrap_or(0);
        let mut tokens = Vec::with_capacity(self.batch * longest);
        for b in 0..self.batch {
            tokens.extend_from_slice(&self.example_tokens(b)[..longest]);
        }
        Self {
            tokens,
            batch: self.batch,
            seq_len: longest,
            labels: self.labels.clone(),
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Seeded per-epoch shuffle, cut into batches padded to `seq_len`.
pub fn batch_iter(
    examples: &[Example],
    batch: usize,
    seq_len: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
        .chunks(batch.max(1))
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs, seq_len)
        })
        .collect()
}

/// Fixed-order batches for evaluation.
pub fn sequential_batches(examples: &[Example], batch: usize, seq_len: usize) -> Vec<Batch> {
    examples
        .chunks(batch.max(1))
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            Batch::from_examples(&refs, seq_len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labelling_rule() {
        assert_eq!(ordered_pair_label(&[1, 3, 7, 4, 11, 5]), 1);
        assert_eq!(ordered_pair_label(&[1, 3, 11, 4, 7, 5]), 0);
        assert_eq!(ordered_pair_label(&[1, 7, 4]), 0);
        assert_eq!(ordered_pair_label(&[1, 11, 4]), 0);
    }

    #[test]
    fn generator_is_balanced_disjoint_and_seeded() {
        let ds = gen_synthetic(64, 32, 10_000, 500, 3).unwrap();
        let ones = ds.train.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones * 2, ds.train.len());
        for ex in ds.train.iter().chain(&ds.dev) {
            assert_eq!(ordered_pair_label(&ex.tokens), ex.label);
            assert!(ex.tokens.len() <= 32 && ex.tokens[0] == CLS);
            assert!(ex.tokens.iter().all(|&t| (t as usize) < 64 && t != PAD));
        }
        let train: HashSet<_> = ds.train.iter().map(|e| &e.tokens).collect();
        assert!(ds.dev.iter().all(|e| !train.contains(&e.tokens)));
        assert_eq!(ds, gen_synthetic(64, 32, 10_000, 500, 3).unwrap());
        assert_ne!(
            ds.train,
            gen_synthetic(64, 32, 10_000, 500, 4).unwrap().train
        );
    }

    #[test]
    fn generator_rejects_tiny_geometry() {
        assert!(gen_synthetic(15, 32, 10, 10, 0).is_err());
        assert!(gen_synthetic(64, 7, 10, 10, 0).is_err());
    }

    #[test]
    fn parse_valid_and_invalid_records() {
        let ex = parse_examples("1\t7 3 11\n", 64, 2).unwrap();
        assert_eq!(
            ex,
            vec![Example {
                tokens: vec![7, 3, 11],
                label: 1
            }]
        );

        let err = parse_examples("1\t1 2\n2\t1 2 3\n", 64, 2).unwrap_err();
        assert!(matches!(err, GrainError::Range { line: 2, .. }), "{err}");
        let err = parse_examples("0\t1 64\n", 64, 2).unwrap_err();
        assert!(matches!(err, GrainError::Range { line: 1, .. }), "{err}");
        let err = parse_examples("0 1 2\n", 64, 2).unwrap_err();
        assert!(matches!(err, GrainError::Parse { line: 1, .. }), "{err}");
        let err = parse_examples("0\t1\nx\t1 2\n", 64, 2).unwrap_err();
        assert!(matches!(err, GrainError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn save_then_load_round_trips() {
        let ds = gen_synthetic(64, 16, 50, 10, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        fs::write(&path, format_examples(&ds.train)).unwrap();
        assert_eq!(load_examples(&path, 64, 2).unwrap(), ds.train);
    }

    #[test]
    fn batching_sizes_and_order() {
        let ds = gen_synthetic(64, 16, 10, 0, 1).unwrap();
        let batches = batch_iter(&ds.train, 3, 16, 5, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.batch).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(batches.iter().all(|b| b.tokens.len() == b.batch * 16));
        assert_eq!(batches, batch_iter(&ds.train, 3, 16, 5, 0));
        assert_ne!(batches, batch_iter(&ds.train, 3, 16, 5, 1));
    }

    #[test]
    fn trimming_drops_only_trailing_pads() {
        let a = Example {
            tokens: vec![1, 7, 11],
            label: 1,
        };
        let b = Example {
            tokens: vec![1, 2],
            label: 0,
        };
        let batch = Batch::from_examples(&[&a, &b], 6);
        let t = batch.trimmed();
        assert_eq!(t.seq_len, 3);
        assert_eq!(t.tokens, vec![1, 7, 11, 1, 2, PAD]);
    }
}

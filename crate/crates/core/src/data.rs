//! Synthetic bilingual unit corpus: generation, JSON-lines IO, hash-based
//! splits and length-bucketed batching.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::required_frames;
use crate::rng::{streams, Rng, RngStreams};

/// Offset used by the shifting mappings.
pub const SHIFT: usize = 1;

/// Rejection-sampling attempts per pair before giving up.
const MAX_ATTEMPTS: usize = 10_000;

/// Ground-truth mapping from a source sequence to its translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Identity.
    Copy,
    /// Every unit `u -> (u + SHIFT) mod V`.
    Shift,
    /// Reverse the sequence, then shift.
    ReverseShift,
    /// Swap adjacent pairs, then duplicate every unit divisible by three.
    LocalSwapStretch,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Copy,
        Difficulty::Shift,
        Difficulty::ReverseShift,
        Difficulty::LocalSwapStretch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Copy => "copy",
            Difficulty::Shift => "shift",
            Difficulty::ReverseShift => "reverse_shift",
            Difficulty::LocalSwapStretch => "local_swap_stretch",
        }
    }

    /// Apply the mapping to one sequence over a vocabulary of `vocab` units.
    pub fn apply(self, src: &[usize], vocab: usize) -> Vec<usize> {
        let shift = |u: usize| (u + SHIFT) % vocab;
        match self {
            Difficulty::Copy => src.to_vec(),
            Difficulty::Shift => src.iter().map(|&u| shift(u)).collect(),
            Difficulty::ReverseShift => src.iter().rev().map(|&u| shift(u)).collect(),
            Difficulty::LocalSwapStretch => {
                let mut swapped = src.to_vec();
                for pair in swapped.chunks_mut(2) {
                    pair.reverse();
                }
                swapped
                    .into_iter()
                    .flat_map(|u| if u % 3 == 0 { vec![u, u] } else { vec![u] })
                    .collect()
            }
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| config_err(format!("unknown difficulty {s:?}")))
    }
}

/// One source/target pair of unit sequences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Corpus generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(config_err(format!("vocabulary {} must be at least 2", self.vocab)));
        }
        if self.max_len < 2 {
            return Err(config_err(format!("max_len {} must be at least 2", self.max_len)));
        }
        Ok(())
    }
}

/// Whether both directions of a pair can be aligned by CTC from a canvas
/// twice the source length.
pub fn alignable(pair: &ParallelPair) -> bool {
    required_frames(&pair.tgt) <= 2 * pair.src.len() && required_frames(&pair.src) <= 2 * pair.tgt.len()
}

fn draw_pair(spec: &CorpusSpec, rng: &mut Rng) -> Result<ParallelPair> {
    for _ in 0..MAX_ATTEMPTS {
        let len = rng.random_range(1..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab)).collect();
        let tgt = spec.difficulty.apply(&src, spec.vocab);
        let pair = ParallelPair { src, tgt };
        if pair.tgt.len() <= spec.max_len && alignable(&pair) {
            return Ok(pair);
        }
    }
    Err(config_err(format!(
        "could not draw an alignable {} pair with max_len {}",
        spec.difficulty, spec.max_len
    )))
}

/// Generate `spec.pairs` pairs, bit-deterministic per seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<ParallelPair>> {
    spec.validate()?;
    let mut rng = RngStreams::new(spec.seed).stream(streams::DATA);
    (0..spec.pairs).map(|_| draw_pair(spec, &mut rng)).collect()
}

/// Check structural invariants of a corpus read from disk and, when the
/// mapping is known, that every pair matches it exactly.
pub fn verify_corpus(pairs: &[ParallelPair], vocab: usize, difficulty: Option<Difficulty>) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.src.is_empty() || p.tgt.is_empty() {
            return Err(Error::Data(format!("pair {i}: empty sequence")));
        }
        if let Some(&u) = p.src.iter().chain(&p.tgt).find(|&&u| u >= vocab) {
            return Err(Error::Data(format!("pair {i}: unit {u} outside vocabulary of {vocab}")));
        }
        if !alignable(p) {
            return Err(Error::Data(format!("pair {i}: lengths {} and {} cannot be aligned", p.src.len(), p.tgt.len())));
        }
        if let Some(d) = difficulty {
            if d.apply(&p.src, vocab) != p.tgt {
                return Err(Error::Data(format!("pair {i}: target does not follow the {d} mapping")));
            }
        }
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ParallelPair>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(pair);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no pairs", path.display())));
    }
    Ok(out)
}

/// Largest unit id in a corpus plus one.
pub fn observed_vocab(pairs: &[ParallelPair]) -> usize {
    pairs.iter().flat_map(|p| p.src.iter().chain(&p.tgt)).max().map_or(0, |&m| m + 1)
}

/// Stable hash of a source sequence.
pub fn source_hash(src: &[usize]) -> u64 {
    src.iter()
        .flat_map(|&u| (u as u64).to_le_bytes())
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<ParallelPair>,
    pub dev: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

/// Partition by source hash into per-mille buckets, so that a source
/// sequence (and any duplicate of it) lands in exactly one split.
pub fn split_by_hash(pairs: &[ParallelPair], dev_permille: u64, test_permille: u64) -> Result<Splits> {
    if dev_permille + test_permille > 1000 {
        return Err(config_err("dev and test fractions exceed the corpus"));
    }
    let mut s = Splits::default();
    for p in pairs {
        let bucket = source_hash(&p.src) % 1000;
        let dest = if bucket < dev_permille {
            &mut s.dev
        } else if bucket < dev_permille + test_permille {
            &mut s.test
        } else {
            &mut s.train
        };
        dest.push(p.clone());
    }
    Ok(s)
}

/// A group of pairs processed in one optimizer step. Sequences are packed
/// back to back rather than padded; [`Batch::mask`] gives the equivalent
/// padded view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a ParallelPair>) -> Self {
        let (src, tgt) = pairs.into_iter().map(|p| (p.src.clone(), p.tgt.clone())).unzip();
        Batch { src, tgt }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.src.iter().chain(&self.tgt).map(Vec::len).sum()
    }

    pub fn src_slices(&self) -> Vec<&[usize]> {
        self.src.iter().map(Vec::as_slice).collect()
    }

    pub fn tgt_slices(&self) -> Vec<&[usize]> {
        self.tgt.iter().map(Vec::as_slice).collect()
    }

    /// Padded width and row-major validity mask of the source or target
    /// side.
    pub fn mask(&self, target: bool) -> (usize, Vec<bool>) {
        let seqs = if target { &self.tgt } else { &self.src };
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mask = seqs.iter().flat_map(|s| (0..width).map(move |i| i < s.len())).collect();
        (width, mask)
    }
}

fn pair_tokens(p: &ParallelPair) -> usize {
    p.src.len() + p.tgt.len()
}

/// Length-bucketed batches holding at most `max_tokens` source plus target
/// units each, in an order determined by `rng`.
pub fn make_batches(pairs: &[ParallelPair], max_tokens: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot batch an empty corpus".into()));
    }
    if let Some(p) = pairs.iter().find(|p| pair_tokens(p) > max_tokens) {
        return Err(Error::Data(format!(
            "pair with {} tokens exceeds the batch budget of {max_tokens}",
            pair_tokens(p)
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    // Stable sort keeps the shuffled order within a length bucket.
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));
    let mut batches = Vec::new();
    let mut current: Vec<&ParallelPair> = Vec::new();
    let mut used = 0;
    for i in order {
        let n = pair_tokens(&pairs[i]);
        if used + n > max_tokens {
            batches.push(Batch::from_pairs(current.drain(..)));
            used = 0;
        }
        current.push(&pairs[i]);
        used += n;
    }
    batches.push(Batch::from_pairs(current));
    batches.shuffle(rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(d: Difficulty) -> CorpusSpec {
        CorpusSpec {
            pairs: 200,
            vocab: 12,
            max_len: 24,
            difficulty: d,
            seed: 5,
        }
    }

    #[test]
    fn mapping_examples() {
        assert_eq!(Difficulty::Copy.apply(&[3, 1, 4], 5), vec![3, 1, 4]);
        assert_eq!(Difficulty::Shift.apply(&[3, 1, 4], 5), vec![4, 2, 0]);
        assert_eq!(Difficulty::ReverseShift.apply(&[3, 1, 4], 5), vec![0, 2, 4]);
        assert_eq!(Difficulty::LocalSwapStretch.apply(&[1, 3, 4], 5), vec![3, 3, 1, 4]);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        for d in Difficulty::ALL {
            let a = generate_corpus(&spec(d)).unwrap();
            assert_eq!(a, generate_corpus(&spec(d)).unwrap());
            assert_eq!(a.len(), 200);
            verify_corpus(&a, 12, Some(d)).unwrap();
            for p in &a {
                assert!((1..=24).contains(&p.src.len()) && (1..=24).contains(&p.tgt.len()));
                assert!(p.tgt.len() <= 2 * p.src.len());
            }
        }
        let mut other = spec(Difficulty::Copy);
        other.seed = 6;
        assert_ne!(generate_corpus(&spec(Difficulty::Copy)).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn bad_bounds_are_config_errors() {
        let mut s = spec(Difficulty::Copy);
        s.vocab = 1;
        assert!(matches!(generate_corpus(&s), Err(Error::Config(_))));
        let mut s = spec(Difficulty::Copy);
        s.max_len = 1;
        assert!(matches!(generate_corpus(&s), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let pairs = generate_corpus(&spec(Difficulty::ReverseShift)).unwrap();
        write_jsonl(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"src\":["));
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, pairs);
        verify_corpus(&back, 12, Some(Difficulty::ReverseShift)).unwrap();
        assert!(verify_corpus(&back, 12, Some(Difficulty::Copy)).is_err());
        assert!(verify_corpus(&back, 5, None).is_err());
    }

    #[test]
    fn malformed_lines_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"src\":[1],\"tgt\":[1],\"extra\":0}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Data(_))));
    }

    #[test]
    fn splits_are_disjoint_by_source() {
        let pairs = generate_corpus(&CorpusSpec {
            pairs: 1000,
            vocab: 3,
            max_len: 4,
            difficulty: Difficulty::Copy,
            seed: 1,
        })
        .unwrap();
        let s = split_by_hash(&pairs, 100, 100).unwrap();
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 1000);
        let srcs = |v: &[ParallelPair]| v.iter().map(|p| p.src.clone()).collect::<std::collections::HashSet<_>>();
        let (a, b, c) = (srcs(&s.train), srcs(&s.dev), srcs(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert!(!s.dev.is_empty() && !s.test.is_empty());
    }

    #[test]
    fn single_pair_batch_and_padding_view() {
        let p = ParallelPair { src: vec![1, 2, 3], tgt: vec![4, 5, 6, 7, 8] };
        let mut rng = RngStreams::new(0).stream(streams::DATA);
        let b = make_batches(std::slice::from_ref(&p), 100, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].mask(false), (3, vec![true; 3]));
        let two = Batch {
            src: vec![vec![1, 2, 3], vec![1, 2, 3, 4, 5]],
            tgt: vec![vec![1], vec![1]],
        };
        let (w, m) = two.mask(false);
        assert_eq!(w, 5);
        assert_eq!(m.iter().filter(|v| !**v).count(), 2);
        assert!(matches!(make_batches(&[p], 7, &mut rng), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn batching_conserves_tokens(seed in 0u64..500, budget in 48usize..200) {
            let pairs = generate_corpus(&CorpusSpec { pairs: 60, vocab: 12, max_len: 24, difficulty: Difficulty::LocalSwapStretch, seed }).unwrap();
            let mut rng = RngStreams::new(seed).stream(streams::DATA);
            let batches = make_batches(&pairs, budget, &mut rng).unwrap();
            let mut rng2 = RngStreams::new(seed).stream(streams::DATA);
            prop_assert_eq!(&batches, &make_batches(&pairs, budget, &mut rng2).unwrap());
            let valid: usize = batches.iter().map(|b| b.mask(false).1.iter().chain(&b.mask(true).1).filter(|v| **v).count()).sum();
            let orig: usize = pairs.iter().map(pair_tokens).sum();
            prop_assert_eq!(valid, orig);
            prop_assert!(batches.iter().all(|b| !b.is_empty() && b.tokens() <= budget));
            let mut seen: Vec<ParallelPair> = batches.iter().flat_map(|b| b.src.iter().cloned().zip(b.tgt.iter().cloned()).map(|(src, tgt)| ParallelPair { src, tgt })).collect();
            let mut want = pairs.clone();
            seen.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
            want.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
            prop_assert_eq!(seen, want);
        }
    }
}

//! Held-out evaluation: translation quality per direction and duplex
//! round trips.

use serde::{Deserialize, Serialize};

use crate::bleu::corpus_bleu;
use crate::data::ParallelPair;
use crate::decode::decode_packed;
use crate::error::{Error, Result};
use crate::model::{DuplexModel, Side};
use crate::params::{Bound, Ctx};
use crate::rdc::{AttnSource, Direction, SplitState};
use crate::tensor::Scalar;

/// Sequences per evaluation pass.
pub const EVAL_BATCH: usize = 32;

/// Position-wise matches of a hypothesis against its reference, and the
/// length both are scored over (the longer of the two).
pub fn token_matches(hyp: &[usize], reference: &[usize]) -> (usize, usize) {
    let hits = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    (hits, hyp.len().max(reference.len()))
}

/// Corpus token accuracy: total position-wise matches over total scored
/// length.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let (hits, total) = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| token_matches(h, r))
        .fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn exact_match(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / hyps.len() as f64
}

/// Translate unit sequences in one direction with CTC decoding
/// (`beam == 1` is greedy).
pub fn translate<S: Scalar>(model: &DuplexModel, b: &Bound<S>, dir: Direction, seqs: &[Vec<usize>], beam: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(seqs.len());
    let ctx = Ctx::eval();
    let side = Side::target_of(dir);
    for chunk in seqs.chunks(EVAL_BATCH) {
        let slices: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let pass = model.translate(b, &ctx, dir, &slices)?;
        let state = pass.output();
        let lp = model.log_probs(b, side, state)?;
        let classes = model.cfg.vocab(side) + 1;
        out.extend(decode_packed(&lp.to_f64_vec(), classes, &state.segments, model.blank(side), beam)?);
    }
    Ok(out)
}

/// Greedy and beam quality of one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: String,
    pub pairs: usize,
    pub beam: usize,
    pub accuracy_greedy: f64,
    pub accuracy_beam: f64,
    pub exact_greedy: f64,
    pub exact_beam: f64,
    pub bleu_greedy: f64,
    pub bleu_beam: f64,
}

pub fn evaluate_direction<S: Scalar>(model: &DuplexModel, b: &Bound<S>, pairs: &[ParallelPair], dir: Direction, beam: usize) -> Result<DirectionReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation needs at least one pair".into()));
    }
    let (src, refs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = pairs
        .iter()
        .map(|p| match dir {
            Direction::Forward => (p.src.clone(), p.tgt.clone()),
            Direction::Reverse => (p.tgt.clone(), p.src.clone()),
        })
        .unzip();
    let greedy = translate(model, b, dir, &src, 1)?;
    let beamed = translate(model, b, dir, &src, beam)?;
    Ok(DirectionReport {
        direction: dir.name().to_string(),
        pairs: pairs.len(),
        beam,
        accuracy_greedy: token_accuracy(&greedy, &refs),
        accuracy_beam: token_accuracy(&beamed, &refs),
        exact_greedy: exact_match(&greedy, &refs),
        exact_beam: exact_match(&beamed, &refs),
        bleu_greedy: corpus_bleu(&greedy, &refs)?,
        bleu_beam: corpus_bleu(&beamed, &refs)?,
    })
}

/// Greedy token accuracy of one direction, the quantity tracked during
/// training.
pub fn greedy_accuracy<S: Scalar>(model: &DuplexModel, b: &Bound<S>, pairs: &[ParallelPair], dir: Direction) -> Result<f64> {
    let (src, refs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = pairs
        .iter()
        .map(|p| match dir {
            Direction::Forward => (p.src.clone(), p.tgt.clone()),
            Direction::Reverse => (p.tgt.clone(), p.src.clone()),
        })
        .unzip();
    Ok(token_accuracy(&translate(model, b, dir, &src, 1)?, &refs))
}

/// Which end a round trip starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundTrip {
    /// `x -> y -> x`.
    Xyx,
    /// `y -> x -> y`.
    Yxy,
}

impl RoundTrip {
    pub fn first(self) -> Direction {
        match self {
            RoundTrip::Xyx => Direction::Forward,
            RoundTrip::Yxy => Direction::Reverse,
        }
    }
}

impl std::str::FromStr for RoundTrip {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyx" => Ok(RoundTrip::Xyx),
            "yxy" => Ok(RoundTrip::Yxy),
            _ => Err(crate::error::config_err(format!("unknown round-trip order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub order: RoundTrip,
    pub sequences: usize,
    /// Max-abs difference between a canvas and its image under the stack
    /// followed by the inverse stack.
    pub representation_error: f64,
    /// Decode, re-embed and translate back; fraction recovered exactly.
    pub token_exact_match: f64,
    pub token_accuracy: f64,
    pub token_bleu: f64,
    /// First translations that decoded to nothing (counted as misses).
    pub empty_intermediate: usize,
}

pub fn roundtrip_eval<S: Scalar>(model: &DuplexModel, b: &Bound<S>, seqs: &[Vec<usize>], order: RoundTrip) -> Result<RoundTripReport> {
    if seqs.is_empty() {
        return Err(Error::Data("round trip needs at least one sequence".into()));
    }
    let ctx = Ctx::eval();
    let first = order.first();
    let start = Side::source_of(first);
    let mut repr = 0.0f64;
    for chunk in seqs.chunks(EVAL_BATCH) {
        let slices: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let (canvas, segments) = model.canvas(b, start, &slices)?;
        let input = SplitState::split_packed(&canvas, segments)?;
        let out = model.stack.run(b, &ctx, input.clone(), first, AttnSource::Own)?.into_output();
        let back = model.stack.run(b, &ctx, out, first.flip(), AttnSource::Own)?.into_output();
        repr = repr.max(back.max_abs_diff(&input));
    }

    let mid = translate(model, b, first, seqs, 1)?;
    let empty = mid.iter().filter(|m| m.is_empty()).count();
    let keep: Vec<usize> = (0..seqs.len()).filter(|&i| !mid[i].is_empty()).collect();
    let kept_mid: Vec<Vec<usize>> = keep.iter().map(|&i| mid[i].clone()).collect();
    let mut back = vec![Vec::new(); seqs.len()];
    if !kept_mid.is_empty() {
        for (&i, hyp) in keep.iter().zip(translate(model, b, first.flip(), &kept_mid, 1)?) {
            back[i] = hyp;
        }
    }
    Ok(RoundTripReport {
        order,
        sequences: seqs.len(),
        representation_error: repr,
        token_exact_match: exact_match(&back, seqs),
        token_accuracy: token_accuracy(&back, seqs),
        token_bleu: corpus_bleu(&back, seqs)?,
        empty_intermediate: empty,
    })
}

//! 4-gram BLEU over unit sequences.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram totals per order.
fn statistics(hyp: &[usize], reference: &[usize]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    (matches, totals)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU in percent: geometric mean of clipped n-gram precisions
/// (n = 1..4) times the brevity penalty, unsmoothed. Orders for which the
/// hypotheses contain no n-grams at all are left out of the mean.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        let (m, t) = statistics(h, r);
        for n in 0..MAX_ORDER {
            matches[n] += m[n];
            totals[n] += t[n];
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let orders: Vec<usize> = (0..MAX_ORDER).filter(|&n| totals[n] > 0).collect();
    if orders.is_empty() || orders.iter().any(|&n| matches[n] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = orders
        .iter()
        .map(|&n| (matches[n] as f64 / totals[n] as f64).ln())
        .sum::<f64>()
        / orders.len() as f64;
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * log_p.exp())
}

/// Sentence BLEU in percent with add-one smoothing on orders 2..4.
pub fn sentence_bleu_smoothed(hyp: &[usize], reference: &[usize]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let (m, t) = statistics(hyp, reference);
    if m[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|n| {
            if n == 0 {
                (m[0] as f64 / t[0] as f64).ln()
            } else {
                ((m[n] + 1) as f64 / (t[n] + 1) as f64).ln()
            }
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    100.0 * brevity_penalty(hyp.len(), reference.len()) * log_p.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let r = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_scores_zero() {
        assert_eq!(corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![5, 6, 7, 8]]).unwrap(), 0.0);
    }

    #[test]
    fn brevity_case_by_hand() {
        let b = corpus_bleu(&[vec![0, 1, 2, 3]], &[vec![0, 1, 2, 3, 4]]).unwrap();
        assert!((b - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
    }

    #[test]
    fn empty_corpus_is_data_error() {
        assert_eq!(corpus_bleu(&[], &[]).unwrap_err().kind(), "data");
    }

    #[test]
    fn smoothed_sentence_bleu_is_positive_without_4gram_matches() {
        let s = sentence_bleu_smoothed(&[1, 2, 3, 9, 4], &[1, 2, 3, 4, 5]);
        assert!(s > 0.0 && s < 100.0);
        assert!((sentence_bleu_smoothed(&[1, 2, 3, 4], &[1, 2, 3, 4]) - 100.0).abs() < 1e-9);
    }
}

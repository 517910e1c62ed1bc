//! CTC decoding: best-path and prefix beam search.

use std::collections::HashMap;

use crate::error::{config_err, shape_err, Result};
use crate::losses::ctc_oracle::collapse;

fn lse(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// A collapsed labeling and its log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub units: Vec<usize>,
    pub score: f64,
}

/// Per-frame argmax, then merge repeats and drop blanks.
pub fn ctc_greedy(lp: &[f64], classes: usize, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = lp
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    collapse(&path, blank)
}

/// Prefix beam search. Probability mass of alignments sharing a collapsed
/// prefix is summed; the `width` best prefixes survive each frame.
/// Returns hypotheses sorted by score, best first.
pub fn ctc_beam(lp: &[f64], classes: usize, blank: usize, width: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(config_err("beam width must be at least 1"));
    }
    if classes == 0 || lp.len() % classes != 0 || blank >= classes {
        return Err(shape_err("ctc_beam", &[lp.len()], &[classes]));
    }
    let ninf = f64::NEG_INFINITY;
    // prefix -> (log mass ending in blank, log mass ending in a label)
    let mut beam: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for row in lp.chunks(classes) {
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::with_capacity(beam.len() * classes);
        for (prefix, pb, pnb) in &beam {
            let total = lse(*pb, *pnb);
            for (k, &p) in row.iter().enumerate() {
                if k == blank {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.0 = lse(e.0, total + p);
                    continue;
                }
                let last = prefix.last().copied();
                let mut ext = prefix.clone();
                ext.push(k);
                let e = next.entry(ext).or_insert((ninf, ninf));
                if last == Some(k) {
                    // A repeat only extends after a blank; otherwise it
                    // folds into the unextended prefix.
                    e.1 = lse(e.1, *pb + p);
                    let same = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    same.1 = lse(same.1, *pnb + p);
                } else {
                    e.1 = lse(e.1, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64, f64)> = next.into_iter().map(|(k, (b, n))| (k, b, n)).collect();
        ranked.sort_by(|a, b| {
            lse(b.1, b.2)
                .total_cmp(&lse(a.1, a.2))
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(width);
        beam = ranked;
    }
    Ok(beam
        .into_iter()
        .map(|(units, pb, pnb)| Hypothesis {
            units,
            score: lse(pb, pnb),
        })
        .collect())
}

/// Decode every segment of a packed `[Σ frames × classes]` table.
/// `beam <= 1` selects best-path decoding.
pub fn decode_packed(lp: &[f64], classes: usize, segments: &[usize], blank: usize, beam: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &len in segments {
        let rows = &lp[start * classes..(start + len) * classes];
        out.push(if beam <= 1 {
            ctc_greedy(rows, classes, blank)
        } else {
            ctc_beam(rows, classes, blank, beam)?.swap_remove(0).units
        });
        start += len;
    }
    Ok(out)
}

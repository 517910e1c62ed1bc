//! Exhaustive CTC reference: sums the probability of every frame-level
//! path whose collapse equals the target. Exponential in the number of
//! frames; meant for tiny cross-checks only.

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Every path of `frames` symbols over `classes`, in lexicographic order.
pub fn all_paths(frames: usize, classes: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = classes.pow(frames as u32);
    (0..total).map(move |mut code| {
        let mut path = vec![0; frames];
        for slot in path.iter_mut().rev() {
            *slot = code % classes;
            code /= classes;
        }
        path
    })
}

/// `-log Σ_paths p(path)` over paths collapsing to `target`; `+inf` when no
/// path does.
pub fn brute_force_nll(lp: &[f64], frames: usize, classes: usize, target: &[usize], blank: usize) -> f64 {
    let scores: Vec<f64> = all_paths(frames, classes)
        .filter(|p| collapse(p, blank) == target)
        .map(|p| p.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum())
        .collect();
    if scores.is_empty() {
        return f64::INFINITY;
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln())
}

/// Marginal log-probability of every distinct collapsed labeling.
pub fn labeling_marginals(lp: &[f64], frames: usize, classes: usize, blank: usize) -> Vec<(Vec<usize>, f64)> {
    let mut acc: std::collections::BTreeMap<Vec<usize>, f64> = std::collections::BTreeMap::new();
    for p in all_paths(frames, classes) {
        let score: f64 = p.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum();
        let e = acc.entry(collapse(&p, blank)).or_insert(f64::NEG_INFINITY);
        *e = super::ctc::lse2(*e, score);
    }
    acc.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[0, 0, 2, 1], 2), vec![0, 1]);
        assert_eq!(collapse(&[0, 2, 0], 2), vec![0, 0]);
        assert!(collapse(&[2, 2], 2).is_empty());
    }

    #[test]
    fn enumerates_every_path() {
        assert_eq!(all_paths(3, 2).count(), 8);
        assert_eq!(all_paths(2, 3).nth(5).unwrap(), vec![1, 2]);
    }
}

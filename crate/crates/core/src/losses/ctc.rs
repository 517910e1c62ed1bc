use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Minimum frames needed to emit `target`: one per label plus a separating
/// blank between equal neighbours.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward and backward log-lattices for one sequence.
#[derive(Debug, Clone)]
pub struct AlignmentLattice {
    pub frames: usize,
    /// Extended label `blank, y1, blank, y2, ..., blank`.
    pub labels: Vec<usize>,
    /// `alpha[t*S + s]`: log mass of prefixes ending in state `s` at frame
    /// `t`, emission at `t` included.
    pub alpha: Vec<f64>,
    /// `beta[t*S + s]`: log mass of completions after frame `t` from state
    /// `s`, emission at `t` excluded.
    pub beta: Vec<f64>,
}

impl AlignmentLattice {
    /// Build both lattices. `lp` is a row-major `[frames × classes]` table.
    pub fn new(lp: &[f64], frames: usize, classes: usize, target: &[usize], blank: usize) -> Result<Self> {
        if frames == 0 || lp.len() != frames * classes {
            return Err(shape_err("ctc", &[frames, classes], &[lp.len()]));
        }
        if blank >= classes {
            return Err(Error::Data(format!("blank id {blank} outside {classes} classes")));
        }
        if let Some(&bad) = target.iter().find(|&&u| u >= classes || u == blank) {
            return Err(Error::Data(format!("target label {bad} is blank or outside {classes} classes")));
        }
        let required = required_frames(target);
        if required > frames {
            return Err(Error::InfeasibleAlignment {
                required,
                available: frames,
            });
        }
        let mut labels = Vec::with_capacity(2 * target.len() + 1);
        labels.push(blank);
        for &u in target {
            labels.push(u);
            labels.push(blank);
        }
        let s_len = labels.len();
        let skip = |s: usize| s >= 2 && labels[s] != blank && labels[s] != labels[s - 2];
        let ninf = f64::NEG_INFINITY;

        let mut alpha = vec![ninf; frames * s_len];
        alpha[0] = lp[blank];
        if s_len > 1 {
            alpha[1] = lp[labels[1]];
        }
        for t in 1..frames {
            let (prev, cur) = alpha.split_at_mut(t * s_len);
            let prev = &prev[(t - 1) * s_len..];
            let row = &lp[t * classes..(t + 1) * classes];
            for s in 0..s_len {
                let a = prev[s];
                let b = if s >= 1 { prev[s - 1] } else { ninf };
                let c = if skip(s) { prev[s - 2] } else { ninf };
                cur[s] = lse3(a, b, c) + row[labels[s]];
            }
        }

        let mut beta = vec![ninf; frames * s_len];
        let last = (frames - 1) * s_len;
        beta[last + s_len - 1] = 0.0;
        if s_len > 1 {
            beta[last + s_len - 2] = 0.0;
        }
        for t in (0..frames - 1).rev() {
            let (cur, next) = beta.split_at_mut((t + 1) * s_len);
            let cur = &mut cur[t * s_len..];
            let row = &lp[(t + 1) * classes..(t + 2) * classes];
            let via = |s: usize| next[s] + row[labels[s]];
            for s in 0..s_len {
                let a = via(s);
                let b = if s + 1 < s_len { via(s + 1) } else { ninf };
                let c = if s + 2 < s_len && skip(s + 2) { via(s + 2) } else { ninf };
                cur[s] = lse3(a, b, c);
            }
        }
        Ok(AlignmentLattice {
            frames,
            labels,
            alpha,
            beta,
        })
    }

    fn states(&self) -> usize {
        self.labels.len()
    }

    /// `log p(y|x)` from the forward lattice.
    pub fn log_likelihood(&self) -> f64 {
        let s = self.states();
        let row = &self.alpha[(self.frames - 1) * s..];
        if s == 1 {
            row[0]
        } else {
            lse2(row[s - 1], row[s - 2])
        }
    }

    /// `log p(y|x)` from the backward lattice and the first frame.
    pub fn log_likelihood_backward(&self, lp: &[f64]) -> f64 {
        let mut total = self.beta[0] + lp[self.labels[0]];
        if self.states() > 1 {
            total = lse2(total, self.beta[1] + lp[self.labels[1]]);
        }
        total
    }

    /// Gradient of `-log p(y|x)` with respect to every log-probability.
    pub fn nll_grad(&self, classes: usize) -> Vec<f64> {
        let s_len = self.states();
        let log_p = self.log_likelihood();
        let mut grad = vec![0.0; self.frames * classes];
        for t in 0..self.frames {
            for s in 0..s_len {
                let v = self.alpha[t * s_len + s] + self.beta[t * s_len + s] - log_p;
                if v > f64::NEG_INFINITY {
                    grad[t * classes + self.labels[s]] -= v.exp();
                }
            }
        }
        grad
    }
}

/// Negative log-likelihood of one target under a `[frames × classes]`
/// log-probability table.
pub fn ctc_nll(lp: &[f64], frames: usize, classes: usize, target: &[usize], blank: usize) -> Result<f64> {
    Ok(-AlignmentLattice::new(lp, frames, classes, target, blank)?.log_likelihood())
}

/// Mean CTC loss over packed sequences.
///
/// `log_probs: [Σ frames × classes]` holds each sequence's rows
/// consecutively, with lengths `segments`; `targets[i]` belongs to segment
/// `i`. Infeasible targets are an error rather than an infinite loss.
pub fn ctc_loss<S: Scalar>(log_probs: &Tensor<S>, targets: &[&[usize]], segments: &[usize], blank: usize) -> Result<Tensor<S>> {
    Ok(ctc_loss_terms(log_probs, targets, segments, blank)?.0)
}

/// As [`ctc_loss`], also returning the per-sequence negative log-likelihoods.
pub fn ctc_loss_terms<S: Scalar>(
    log_probs: &Tensor<S>,
    targets: &[&[usize]],
    segments: &[usize],
    blank: usize,
) -> Result<(Tensor<S>, Vec<f64>)> {
    let (rows, classes) = log_probs.dims2("ctc_loss")?;
    if segments.len() != targets.len() || segments.iter().sum::<usize>() != rows || segments.is_empty() {
        return Err(shape_err("ctc_loss", log_probs.shape(), segments));
    }
    let lp: Vec<f64> = log_probs.to_f64_vec();
    let n = segments.len() as f64;
    let mut nlls = Vec::with_capacity(segments.len());
    let mut grad = vec![0.0; rows * classes];
    let mut start = 0;
    for (&len, target) in segments.iter().zip(targets) {
        let span = start * classes..(start + len) * classes;
        let lattice = AlignmentLattice::new(&lp[span.clone()], len, classes, target, blank)?;
        nlls.push(-lattice.log_likelihood());
        if log_probs.requires_grad() {
            for (g, v) in grad[span].iter_mut().zip(lattice.nll_grad(classes)) {
                *g = v / n;
            }
        }
        start += len;
    }
    let mean = nlls.iter().sum::<f64>() / n;
    let out = Tensor::from_op(
        "ctc_loss",
        Vec::new(),
        vec![S::of(mean)],
        vec![log_probs.clone()],
        Box::new(move |g, _, _| {
            let g = g[0].f64();
            vec![Some(grad.iter().map(|&v| S::of(g * v)).collect())]
        }),
    );
    Ok((out, nlls))
}

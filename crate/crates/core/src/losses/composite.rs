use serde::{Deserialize, Serialize};

use super::{ctc_loss, fba_loss, mse_loss, required_frames, LossWeights};
use crate::decode::decode_packed;
use crate::error::{config_err, Result};
use crate::model::{DuplexModel, Seqs, Side};
use crate::params::{Bound, Ctx};
use crate::rdc::{Direction, StackPass};
use crate::tensor::{Scalar, Tensor};

/// Whether the ends carry discrete units (CTC terms) or dense frames (MSE
/// terms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Unit,
    Mel,
}

/// Unweighted values of the six terms and the weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositeTerms {
    /// CTC (or MSE) of Y given X.
    pub fwd: f64,
    /// CTC (or MSE) of X given Y.
    pub rev: f64,
    pub fba_fwd: f64,
    pub fba_rev: f64,
    /// Cycle term on the X side, `x` vs `f←(f→(x))`.
    pub cc_x: f64,
    /// Cycle term on the Y side.
    pub cc_y: f64,
    pub total: f64,
    /// Sequences left out of the unit cycle terms because the first
    /// translation was empty or too short to align the original.
    pub cc_skipped: usize,
}

fn seq_slices(v: &[Vec<usize>]) -> Vec<&[usize]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Mean-pool each segment: `[Σ t × h] -> [segments × h]`.
fn pool_segments<S: Scalar>(x: &Tensor<S>, segments: &[usize]) -> Result<Tensor<S>> {
    let rows: usize = segments.iter().sum();
    let mut pool = vec![0.0; segments.len() * rows];
    let mut start = 0;
    for (i, &len) in segments.iter().enumerate() {
        for r in start..start + len {
            pool[i * rows + r] = 1.0 / len as f64;
        }
        start += len;
    }
    Tensor::<S>::from_f64(&[segments.len(), rows], &pool)?.matmul(x)
}

/// Agreement of `live` states against stop-gradient `fixed` states at the
/// given positions. Equal-length passes compare frame by frame; otherwise
/// each sequence is mean-pooled over time first.
fn agreement<S: Scalar>(live: &StackPass<S>, fixed: &StackPass<S>, positions: impl Iterator<Item = usize>) -> Result<Tensor<S>> {
    let same = live.states[0].segments == fixed.states[0].segments;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for l in positions {
        let (ls, fs) = (&live.states[l], &fixed.states[l]);
        if same {
            a.push(ls.merge()?);
            b.push(fs.merge()?);
        } else {
            a.push(pool_segments(&ls.merge()?, &ls.segments)?);
            b.push(pool_segments(&fs.merge()?, &fs.segments)?);
        }
    }
    fba_loss(&a, &b)
}

/// Stop-gradient side of the agreement terms: the same pass, replayed
/// without dropout when the live pass used it, or under separately bound
/// parameters when given.
fn replay<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    sg: Option<&Bound<S>>,
    ctx: &Ctx,
    dir: Direction,
    seqs: Seqs<'_>,
    live: &StackPass<S>,
) -> Result<StackPass<S>> {
    if let Some(sg) = sg {
        model.translate(sg, &Ctx::eval(), dir, seqs)
    } else if ctx.training && model.cfg.stack.dropout > 0.0 {
        model.translate(b, &Ctx::eval(), dir, seqs)
    } else {
        Ok(live.clone())
    }
}

/// Unit cycle term for the `start` side: decode the first translation
/// greedily, re-encode it at the opposite end, translate back and score
/// the original units with CTC. Gradient flows through the second pass
/// only. Returns `None` when no sequence can be scored.
pub fn cycle_loss_units<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    ctx: &Ctx,
    start: Side,
    originals: Seqs<'_>,
    first: &StackPass<S>,
) -> Result<(Option<Tensor<S>>, usize)> {
    let mid = match start {
        Side::X => Side::Y,
        Side::Y => Side::X,
    };
    let out = first.output();
    let lp = model.log_probs(b, mid, out)?;
    let hyps = decode_packed(&lp.to_f64_vec(), model.cfg.vocab(mid) + 1, &out.segments, model.blank(mid), 1)?;
    let mut keep_hyp = Vec::new();
    let mut keep_orig = Vec::new();
    for (h, o) in hyps.iter().zip(originals) {
        if !h.is_empty() && 2 * h.len() >= required_frames(o) {
            keep_hyp.push(h.clone());
            keep_orig.push(*o);
        }
    }
    let skipped = originals.len() - keep_orig.len();
    if keep_hyp.is_empty() {
        return Ok((None, skipped));
    }
    let back_dir = match start {
        Side::X => Direction::Reverse,
        Side::Y => Direction::Forward,
    };
    let back = model.translate(b, ctx, back_dir, &seq_slices(&keep_hyp))?;
    let back_out = back.output();
    let lp = model.log_probs(b, start, back_out)?;
    let loss = ctc_loss(&lp, &keep_orig, &back_out.segments, model.blank(start))?;
    Ok((Some(loss), skipped))
}

/// Weighted sum of the six training terms on one batch of pairs.
pub fn composite_loss<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    ctx: &Ctx,
    src: Seqs<'_>,
    tgt: Seqs<'_>,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(Tensor<S>, CompositeTerms)> {
    composite_loss_with(model, b, None, ctx, src, tgt, weights, mode)
}

/// [`composite_loss`] with the stop-gradient side of the agreement terms
/// evaluated under `sg` instead of `b`. Holding `sg` fixed while `b` varies
/// makes the loss an ordinary function whose derivative is exactly the
/// gradient that training applies.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss_with<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    sg: Option<&Bound<S>>,
    ctx: &Ctx,
    src: Seqs<'_>,
    tgt: Seqs<'_>,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(Tensor<S>, CompositeTerms)> {
    weights.validate()?;
    let [w1, w2, w3, w4, w5, w6] = weights.as_array();
    let fwd = model.translate(b, ctx, Direction::Forward, src)?;
    let rev = model.translate(b, ctx, Direction::Reverse, tgt)?;
    let depth = model.stack.depth();
    let mut terms = CompositeTerms::default();
    let mut parts: Vec<Tensor<S>> = Vec::new();
    let mut push = |t: Tensor<S>, w: f64, slot: &mut f64| {
        *slot = t.item().f64();
        if w != 0.0 {
            parts.push(t.scale(w));
        }
    };

    match mode {
        LossMode::Unit => {
            let out = fwd.output();
            let lp_y = model.log_probs(b, Side::Y, out)?;
            push(ctc_loss(&lp_y, tgt, &out.segments, model.blank(Side::Y))?, w1, &mut terms.fwd);
            let out = rev.output();
            let lp_x = model.log_probs(b, Side::X, out)?;
            push(ctc_loss(&lp_x, src, &out.segments, model.blank(Side::X))?, w2, &mut terms.rev);
        }
        LossMode::Mel => {
            let (y_frames, y_seg) = model.canvas(b, Side::Y, tgt)?;
            let (x_frames, x_seg) = model.canvas(b, Side::X, src)?;
            if x_seg != y_seg {
                return Err(config_err("dense targets need equal source and target lengths"));
            }
            push(mse_loss(&fwd.output().merge()?, &y_frames.detach())?, w1, &mut terms.fwd);
            push(mse_loss(&rev.output().merge()?, &x_frames.detach())?, w2, &mut terms.rev);
        }
    }

    if w3 != 0.0 || w4 != 0.0 {
        let rev_fixed = replay(model, b, sg, ctx, Direction::Reverse, tgt, &rev)?;
        let fwd_fixed = replay(model, b, sg, ctx, Direction::Forward, src, &fwd)?;
        push(agreement(&fwd, &rev_fixed, 1..=depth)?, w3, &mut terms.fba_fwd);
        push(agreement(&rev, &fwd_fixed, 0..depth)?, w4, &mut terms.fba_rev);
    }

    if w5 != 0.0 || w6 != 0.0 {
        match mode {
            LossMode::Unit => {
                let (cx, sx) = cycle_loss_units(model, b, ctx, Side::X, src, &fwd)?;
                let (cy, sy) = cycle_loss_units(model, b, ctx, Side::Y, tgt, &rev)?;
                terms.cc_skipped = sx + sy;
                if let Some(t) = cx {
                    push(t, w5, &mut terms.cc_x);
                }
                if let Some(t) = cy {
                    push(t, w6, &mut terms.cc_y);
                }
            }
            LossMode::Mel => {
                let x_in = fwd.states[0].merge()?;
                let back = model.stack.map(b, ctx, fwd.output().clone(), Direction::Reverse)?;
                push(mse_loss(&back.merge()?, &x_in)?, w5, &mut terms.cc_x);
                let y_in = rev.states[depth].merge()?;
                let back = model.stack.map(b, ctx, rev.output().clone(), Direction::Forward)?;
                push(mse_loss(&back.merge()?, &y_in)?, w6, &mut terms.cc_y);
            }
        }
    }

    let mut total = parts.pop().unwrap_or_else(|| Tensor::scalar(S::zero()));
    for p in parts {
        total = total.add(&p)?;
    }
    terms.total = total.item().f64();
    Ok((total, terms))
}

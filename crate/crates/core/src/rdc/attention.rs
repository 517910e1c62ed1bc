use std::rc::Rc;

use super::{per_segment, LayerNorm, Linear};
use crate::error::{shape_err, Result};
use crate::params::{Bound, Ctx, Init, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// What the attention keys and values are computed from.
#[derive(Debug, Clone, Copy)]
pub enum AttnSource<'a, S: Scalar> {
    /// Keys and values come from the query input.
    Own,
    /// Cross-attention to a packed memory whose segments pair one-to-one
    /// with the query segments.
    Memory { kv: &'a Tensor<S>, segments: &'a [usize] },
}

/// Multi-head attention with learned relative-position key embeddings.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// `[(2R-1) × d_head]` table shared across heads.
    pub rel: ParamId,
    pub heads: usize,
    pub max_rel: usize,
    pub dropout: f64,
}

/// Offset table for a `tq × tk` score matrix: entry `(i, j)` is
/// `clip(j - i, -(R-1), R-1) + R - 1`.
pub fn relative_index(tq: usize, tk: usize, max_rel: usize) -> Vec<usize> {
    let r = max_rel as isize - 1;
    let mut out = Vec::with_capacity(tq * tk);
    for i in 0..tq as isize {
        for j in 0..tk as isize {
            out.push(((j - i).clamp(-r, r) + r) as usize);
        }
    }
    out
}

/// Scaled dot-product attention for one query/memory pair.
///
/// `q: [tq×c]`, `k, v: [tk×c]`, `rel: [(2R-1)×d]` with `d = c / heads`.
/// Logits are `(q_i·k_j + q_i·rel[idx(i,j)]) / sqrt(d)`; the relative term
/// is formed as `q·relᵀ` followed by a gather.
pub fn attention_core<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    rel: &Tensor<S>,
    heads: usize,
    max_rel: usize,
) -> Result<Tensor<S>> {
    let (tq, c) = q.dims2("attention")?;
    let (tk, kc) = k.dims2("attention")?;
    let nrel = 2 * max_rel - 1;
    if kc != c || v.shape() != k.shape() || c % heads != 0 || rel.shape() != [nrel, c / heads] {
        return Err(shape_err("attention", q.shape(), k.shape()));
    }
    let d = c / heads;
    let idx = relative_index(tq, tk, max_rel);
    let flat: Rc<[usize]> = (0..tq * tk).map(|n| (n / tk) * nrel + idx[n]).collect();
    let rel_t = rel.transpose()?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (q.narrow_cols(hd * d, d)?, k.narrow_cols(hd * d, d)?, v.narrow_cols(hd * d, d)?)
        };
        let content = qh.matmul(&kh.transpose()?)?;
        let position = qh.matmul(&rel_t)?.gather(flat.clone(), &[tq, tk])?;
        let w = content.add(&position)?.scale(scale).softmax_rows(None)?;
        outs.push(w.matmul(&vh)?);
    }
    if heads == 1 {
        Ok(outs.pop().expect("one head"))
    } else {
        Tensor::concat_cols(&outs)
    }
}

impl Mhsa {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        width: usize,
        heads: usize,
        max_rel: usize,
        dropout: f64,
    ) -> Self {
        let d = width / heads;
        Mhsa {
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), width),
            q: Linear::new(store, rng, &format!("{name}.wq"), width, width, true),
            k: Linear::new(store, rng, &format!("{name}.wk"), width, width, true),
            v: Linear::new(store, rng, &format!("{name}.wv"), width, width, true),
            o: Linear::new(store, rng, &format!("{name}.wo"), width, width, true),
            rel: store.add(
                format!("{name}.rel"),
                &[2 * max_rel - 1, d],
                ParamKind::Weight,
                Init::Uniform(1.0 / (d as f64).sqrt()),
                rng,
            ),
            heads,
            max_rel,
            dropout,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        b: &Bound<S>,
        ctx: &Ctx,
        x: &Tensor<S>,
        segments: &[usize],
        src: AttnSource<'_, S>,
    ) -> Result<Tensor<S>> {
        let xq = self.ln.apply(b, x)?;
        let (xkv, kv_segments) = match src {
            AttnSource::Own => (xq.clone(), segments),
            AttnSource::Memory { kv, segments: ms } => {
                if ms.len() != segments.len() {
                    return Err(shape_err("cross_attention", segments, ms));
                }
                (self.ln.apply(b, kv)?, ms)
            }
        };
        let q = self.q.apply(b, &xq)?;
        let k = self.k.apply(b, &xkv)?;
        let v = self.v.apply(b, &xkv)?;
        let rel = b.get(self.rel);
        let starts: Vec<usize> = kv_segments
            .iter()
            .scan(0, |acc, &n| {
                let s = *acc;
                *acc += n;
                Some(s)
            })
            .collect();
        let single = segments.len() == 1;
        let att = per_segment(&q, segments, |i, qs| {
            if single {
                return attention_core(qs, &k, &v, rel, self.heads, self.max_rel);
            }
            let (s, n) = (starts[i], kv_segments[i]);
            attention_core(qs, &k.narrow_rows(s, n)?, &v.narrow_rows(s, n)?, rel, self.heads, self.max_rel)
        })?;
        self.o.apply(b, &att)?.dropout(self.dropout, ctx.training, &mut *ctx.rng())
    }
}

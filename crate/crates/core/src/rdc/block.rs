use super::{AttnSource, Cnn, Ffn, Mhsa, RdcConfig, SplitState};
use crate::error::Result;
use crate::params::{Bound, Ctx, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// One reversible layer: four residual couplings between the halves.
///
/// Forward form:
/// `y1 = x1 + FFN_a(x2)/2`, `y2 = x2 + MHSA(y1)`, `z1 = y1 + CNN(y2)`,
/// `z2 = y2 + FFN_b(z1)/2`. The reverse form recomputes each sub-module on
/// an already-known input and subtracts, in the mirrored order.
#[derive(Debug, Clone)]
pub struct RdcLayer {
    /// 1-based position in the stack, used for tracing.
    pub index: usize,
    pub ffn_a: Ffn,
    pub mhsa: Mhsa,
    pub cnn: Cnn,
    pub ffn_b: Ffn,
}

impl RdcLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, prefix: &str, index: usize, cfg: &RdcConfig) -> Self {
        let c = cfg.half();
        RdcLayer {
            index,
            ffn_a: Ffn::new(store, rng, &format!("{prefix}.ffn_a"), c, cfg.ffn_mult, cfg.dropout),
            mhsa: Mhsa::new(store, rng, &format!("{prefix}.mhsa"), c, cfg.heads, cfg.max_rel, cfg.dropout),
            cnn: Cnn::new(store, rng, &format!("{prefix}.cnn"), c, cfg.kernel, cfg.dropout),
            ffn_b: Ffn::new(store, rng, &format!("{prefix}.ffn_b"), c, cfg.ffn_mult, cfg.dropout),
        }
    }

    fn f_a<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, x: &Tensor<S>) -> Result<Tensor<S>> {
        ctx.record('f', self.index, 0);
        Ok(self.ffn_a.forward(b, ctx, x)?.scale(0.5))
    }

    fn m<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, x: &Tensor<S>, seg: &[usize], src: AttnSource<'_, S>) -> Result<Tensor<S>> {
        ctx.record('m', self.index, 1);
        self.mhsa.forward(b, ctx, x, seg, src)
    }

    fn c<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, x: &Tensor<S>, seg: &[usize]) -> Result<Tensor<S>> {
        ctx.record('c', self.index, 2);
        self.cnn.forward(b, ctx, x, seg)
    }

    fn f_b<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, x: &Tensor<S>) -> Result<Tensor<S>> {
        ctx.record('f', self.index, 3);
        Ok(self.ffn_b.forward(b, ctx, x)?.scale(0.5))
    }

    pub fn forward<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, s: &SplitState<S>, src: AttnSource<'_, S>) -> Result<SplitState<S>> {
        let seg = &s.segments;
        let y1 = s.h1.add(&self.f_a(b, ctx, &s.h2)?)?;
        let y2 = s.h2.add(&self.m(b, ctx, &y1, seg, src)?)?;
        let z1 = y1.add(&self.c(b, ctx, &y2, seg)?)?;
        let z2 = y2.add(&self.f_b(b, ctx, &z1)?)?;
        Ok(SplitState {
            h1: z1,
            h2: z2,
            segments: s.segments.clone(),
        })
    }

    pub fn reverse<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, s: &SplitState<S>, src: AttnSource<'_, S>) -> Result<SplitState<S>> {
        let seg = &s.segments;
        let y2 = s.h2.sub(&self.f_b(b, ctx, &s.h1)?)?;
        let y1 = s.h1.sub(&self.c(b, ctx, &y2, seg)?)?;
        let x2 = y2.sub(&self.m(b, ctx, &y1, seg, src)?)?;
        let x1 = y1.sub(&self.f_a(b, ctx, &x2)?)?;
        Ok(SplitState {
            h1: x1,
            h2: x2,
            segments: s.segments.clone(),
        })
    }
}

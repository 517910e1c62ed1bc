use super::{LayerNorm, Linear};
use crate::error::Result;
use crate::params::{Bound, Ctx, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Position-wise feed-forward block: LN, expand, Swish, dropout, project,
/// dropout.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub ln: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl Ffn {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, width: usize, mult: usize, dropout: f64) -> Self {
        Ffn {
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), width),
            up: Linear::new(store, rng, &format!("{name}.w1"), width, mult * width, true),
            down: Linear::new(store, rng, &format!("{name}.w2"), mult * width, width, true),
            dropout,
        }
    }

    pub fn forward<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.up.apply(b, &self.ln.apply(b, x)?)?.silu();
        let h = h.dropout(self.dropout, ctx.training, &mut *ctx.rng())?;
        self.down.apply(b, &h)?.dropout(self.dropout, ctx.training, &mut *ctx.rng())
    }
}

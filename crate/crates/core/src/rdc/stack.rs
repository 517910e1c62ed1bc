use serde::{Deserialize, Serialize};

use super::{AttnSource, RdcConfig, RdcLayer, SplitState};
use crate::error::Result;
use crate::params::{Bound, Ctx, ParamStore, TraceEvent};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Mapping direction: `Forward` is X -> Y, `Reverse` is Y -> X.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[serde(rename = "fwd")]
    Forward,
    #[serde(rename = "rev")]
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Reverse => "rev",
        }
    }
}

/// Symmetric stack of `L` reversible layers.
///
/// The forward mapping runs layers `1..L/2` in reverse form and then
/// `L/2+1..L` in forward form; the reverse mapping is its exact mirror, so
/// the two sub-module chains read as one palindrome.
#[derive(Debug, Clone)]
pub struct DuplexStack {
    pub layers: Vec<RdcLayer>,
}

/// Every intermediate state of one pass, indexed by stack position:
/// `states[k]` lies between layers `k` and `k+1`, so `states[0]` is the
/// X-side end and `states[L]` the Y-side end in both directions.
#[derive(Debug, Clone)]
pub struct StackPass<S: Scalar> {
    pub direction: Direction,
    pub states: Vec<SplitState<S>>,
}

impl<S: Scalar> StackPass<S> {
    pub fn output(&self) -> &SplitState<S> {
        match self.direction {
            Direction::Forward => self.states.last().expect("non-empty pass"),
            Direction::Reverse => &self.states[0],
        }
    }

    pub fn into_output(mut self) -> SplitState<S> {
        match self.direction {
            Direction::Forward => self.states.pop().expect("non-empty pass"),
            Direction::Reverse => self.states.swap_remove(0),
        }
    }
}

impl DuplexStack {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, prefix: &str, cfg: &RdcConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (1..=cfg.layers)
            .map(|l| RdcLayer::new(store, rng, &format!("{prefix}.layer{l}"), l, cfg))
            .collect();
        Ok(DuplexStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Run the stack in `dir`, keeping every intermediate state.
    pub fn run<S: Scalar>(
        &self,
        b: &Bound<S>,
        ctx: &Ctx,
        input: SplitState<S>,
        dir: Direction,
        src: AttnSource<'_, S>,
    ) -> Result<StackPass<S>> {
        let l = self.layers.len();
        let half = l / 2;
        let mut states = Vec::with_capacity(l + 1);
        states.push(input);
        match dir {
            Direction::Forward => {
                for (k, layer) in self.layers.iter().enumerate() {
                    let cur = states.last().expect("state");
                    let next = if k < half {
                        layer.reverse(b, ctx, cur, src)?
                    } else {
                        layer.forward(b, ctx, cur, src)?
                    };
                    states.push(next);
                }
            }
            Direction::Reverse => {
                for (k, layer) in self.layers.iter().enumerate().rev() {
                    let cur = states.last().expect("state");
                    let next = if k < half {
                        layer.forward(b, ctx, cur, src)?
                    } else {
                        layer.reverse(b, ctx, cur, src)?
                    };
                    states.push(next);
                }
                states.reverse();
            }
        }
        Ok(StackPass { direction: dir, states })
    }

    pub fn map<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, input: SplitState<S>, dir: Direction) -> Result<SplitState<S>> {
        Ok(self.run(b, ctx, input, dir, AttnSource::Own)?.into_output())
    }
}

/// Sub-module symbols of a trace, grouped four per layer application.
pub fn chain_string(trace: &[TraceEvent]) -> String {
    let mut out = String::with_capacity(trace.len() * 5 / 4);
    for (i, e) in trace.iter().enumerate() {
        if i > 0 && i % 4 == 0 {
            out.push(' ');
        }
        out.push(e.symbol);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{randomize, small_cfg};
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::rng::RngStreams;

    fn stack(layers: usize, hidden: usize, seed: u64) -> (ParamStore<f64>, DuplexStack) {
        let mut rng = RngStreams::new(seed).stream("init");
        let mut store = ParamStore::new();
        let s = DuplexStack::new(&mut store, &mut rng, "stack", &small_cfg(hidden, layers)).unwrap();
        randomize(&mut store, seed);
        (store, s)
    }

    #[test]
    fn odd_depth_is_config_error() {
        let mut rng = RngStreams::new(0).stream("init");
        let mut store = ParamStore::<f64>::new();
        let err = DuplexStack::new(&mut store, &mut rng, "s", &small_cfg(8, 3)).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn zero_output_maps_give_identity() {
        let mut rng = RngStreams::new(1).stream("init");
        let mut store = ParamStore::<f64>::new();
        let s = DuplexStack::new(&mut store, &mut rng, "s", &small_cfg(8, 2)).unwrap();
        for l in &s.layers {
            for lin in [&l.ffn_a.down, &l.mhsa.o, &l.cnn.pw2, &l.ffn_b.down] {
                let n = store.entry(lin.w).numel();
                store.set(lin.w, vec![0.0; n]);
            }
        }
        let x = SplitState::split(&rand_tensor(&[4, 8], &mut rng)).unwrap();
        let b = store.bind_frozen();
        for dir in [Direction::Forward, Direction::Reverse] {
            let y = s.map(&b, &Ctx::eval(), x.clone(), dir).unwrap();
            assert_eq!(y.max_abs_diff(&x), 0.0);
        }
    }

    #[test]
    fn deep_round_trip() {
        let (store, s) = stack(8, 64, 2);
        let b = store.bind_frozen();
        let x = SplitState::split(&rand_tensor(&[12, 64], &mut RngStreams::new(3).stream("x"))).unwrap();
        let ctx = Ctx::eval();
        let y = s.map(&b, &ctx, x.clone(), Direction::Forward).unwrap();
        let back = s.map(&b, &ctx, y, Direction::Reverse).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-7, "{}", back.max_abs_diff(&x));
    }

    #[test]
    fn passes_share_position_indexing() {
        let (store, s) = stack(4, 8, 4);
        let b = store.bind_frozen();
        let ctx = Ctx::eval();
        let x = SplitState::split(&rand_tensor(&[5, 8], &mut RngStreams::new(5).stream("x"))).unwrap();
        let fwd = s.run(&b, &ctx, x, Direction::Forward, AttnSource::Own).unwrap();
        let rev = s.run(&b, &ctx, fwd.output().clone(), Direction::Reverse, AttnSource::Own).unwrap();
        assert_eq!(rev.states.len(), 5);
        for (a, r) in fwd.states.iter().zip(&rev.states) {
            assert!(a.max_abs_diff(r) < 1e-10);
        }
    }

    #[test]
    fn chain_is_palindrome() {
        let (store, s) = stack(4, 8, 6);
        let b = store.bind_frozen();
        let ctx = Ctx::eval().with_trace();
        let x = SplitState::split(&rand_tensor(&[3, 8], &mut RngStreams::new(7).stream("x"))).unwrap();
        s.map(&b, &ctx, x.clone(), Direction::Forward).unwrap();
        let fwd = ctx.take_trace();
        s.map(&b, &ctx, x, Direction::Reverse).unwrap();
        let rev = ctx.take_trace();
        assert_eq!(chain_string(&fwd), "fcmf fcmf fmcf fmcf");
        let mirrored: Vec<_> = rev.iter().rev().copied().collect();
        assert_eq!(fwd, mirrored);
    }

    #[test]
    fn single_precision_layer_round_trip() {
        let (store, s) = stack(2, 64, 8);
        let store = store.cast::<f32>();
        let b = store.bind_frozen();
        let ctx = Ctx::eval();
        let x64 = rand_tensor(&[32, 64], &mut RngStreams::new(9).stream("x"));
        let x = crate::Tensor::<f32>::from_f64(&[32, 64], &x64.to_f64_vec()).unwrap();
        let x = SplitState::split(&x).unwrap();
        let layer = &s.layers[0];
        let y = layer.forward(&b, &ctx, &x, AttnSource::Own).unwrap();
        let back = layer.reverse(&b, &ctx, &y, AttnSource::Own).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-4);
    }
}

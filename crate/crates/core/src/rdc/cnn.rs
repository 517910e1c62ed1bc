use super::{LayerNorm, Linear, BN_EPS};
use crate::error::Result;
use crate::params::{Bound, Ctx, Init, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{NormMode, Scalar, Tensor};

/// Convolution block: LN, pointwise expansion to `2c`, GLU, depthwise
/// convolution, batch norm, Swish, pointwise projection, dropout.
#[derive(Debug, Clone)]
pub struct Cnn {
    pub ln: LayerNorm,
    pub pw1: Linear,
    pub dw: ParamId,
    pub dw_bias: ParamId,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub pw2: Linear,
    pub dropout: f64,
}

impl Cnn {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, width: usize, kernel: usize, dropout: f64) -> Self {
        Cnn {
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), width),
            pw1: Linear::new(store, rng, &format!("{name}.pw1"), width, 2 * width, true),
            dw: store.add(
                format!("{name}.dw"),
                &[width, kernel],
                ParamKind::Weight,
                Init::Uniform(1.0 / (kernel as f64).sqrt()),
                rng,
            ),
            dw_bias: store.add(format!("{name}.dw_bias"), &[width], ParamKind::Weight, Init::Zeros, rng),
            bn_gain: store.add(format!("{name}.bn.gain"), &[width], ParamKind::Weight, Init::Ones, rng),
            bn_bias: store.add(format!("{name}.bn.bias"), &[width], ParamKind::Weight, Init::Zeros, rng),
            running_mean: store.add(format!("{name}.bn.running_mean"), &[width], ParamKind::Buffer, Init::Zeros, rng),
            running_var: store.add(format!("{name}.bn.running_var"), &[width], ParamKind::Buffer, Init::Ones, rng),
            pw2: Linear::new(store, rng, &format!("{name}.pw2"), width, width, true),
            dropout,
        }
    }

    pub fn forward<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, x: &Tensor<S>, segments: &[usize]) -> Result<Tensor<S>> {
        let h = self.pw1.apply(b, &self.ln.apply(b, x)?)?.glu()?;
        let h = h.conv1d_depthwise_packed(b.get(self.dw), segments)?.add(b.get(self.dw_bias))?;
        let (gain, bias) = (b.get(self.bn_gain), b.get(self.bn_bias));
        let h = if ctx.training {
            let (h, stats) = h.batch_norm(gain, bias, NormMode::Batch, BN_EPS)?;
            if let Some(stats) = stats {
                ctx.push_bn_update(self.running_mean, self.running_var, stats);
            }
            h
        } else {
            let mean = b.get(self.running_mean).to_f64_vec();
            let var = b.get(self.running_var).to_f64_vec();
            h.batch_norm(gain, bias, NormMode::Running { mean: &mean, var: &var }, BN_EPS)?.0
        };
        self.pw2.apply(b, &h.silu())?.dropout(self.dropout, ctx.training, &mut *ctx.rng())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::rng::RngStreams;

    #[test]
    fn delta_kernel_and_identity_projection_reduce_to_gated_swish() {
        let mut rng = RngStreams::new(7).stream("init");
        let mut store = ParamStore::<f64>::new();
        let c = 3;
        let cnn = Cnn::new(&mut store, &mut rng, "cnn", c, 3, 0.0);
        let mut delta = vec![0.0; c * 3];
        (0..c).for_each(|ch| delta[ch * 3 + 1] = 1.0);
        store.set(cnn.dw, delta);
        let mut eye = vec![0.0; c * c];
        (0..c).for_each(|i| eye[i * c + i] = 1.0);
        store.set(cnn.pw2.w, eye);
        let x = rand_tensor(&[4, c], &mut rng);
        let b = store.bind_frozen();
        let y = cnn.forward(&b, &Ctx::eval(), &x, &[4]).unwrap();
        // Running stats are (0, 1) with unit gain: BN only rescales by 1/sqrt(1+eps).
        let ln = x.layer_norm(b.get(cnn.ln.gain), b.get(cnn.ln.bias), 1e-5).unwrap();
        let g = ln.linear(b.get(cnn.pw1.w), None).unwrap().glu().unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (got, &v) in y.data().iter().zip(g.data()) {
            let u = v * s;
            assert!((got - u / (1.0 + (-u).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_second_projection_gives_zero_output() {
        let mut rng = RngStreams::new(9).stream("init");
        let mut store = ParamStore::<f64>::new();
        let cnn = Cnn::new(&mut store, &mut rng, "cnn", 4, 3, 0.0);
        crate::params::perturb(&mut store, 9, 0.5);
        store.set(cnn.pw2.w, vec![0.0; 16]);
        if let Some(bias) = cnn.pw2.b {
            store.set(bias, vec![0.0; 4]);
        }
        let x = rand_tensor(&[6, 4], &mut rng);
        let y = cnn.forward(&store.bind_frozen(), &Ctx::eval(), &x, &[2, 4]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn training_pass_queues_running_stats() {
        let mut rng = RngStreams::new(8).stream("init");
        let mut store = ParamStore::<f64>::new();
        let cnn = Cnn::new(&mut store, &mut rng, "cnn", 2, 3, 0.0);
        let ctx = Ctx::new(true, RngStreams::new(0).stream("dropout"));
        let x = rand_tensor(&[5, 2], &mut rng);
        cnn.forward(&store.bind_frozen(), &ctx, &x, &[5]).unwrap();
        let updates = ctx.take_bn_updates();
        assert_eq!(updates.len(), 1);
        assert_eq!(updates[0].0, cnn.running_mean);
    }
}

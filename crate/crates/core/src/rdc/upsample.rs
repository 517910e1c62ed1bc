use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Stride-2 transposed convolution doubling the time axis.
#[derive(Debug, Clone)]
pub struct Upsampler {
    /// `[k×h×h]` kernel.
    pub w: ParamId,
    pub b: ParamId,
}

impl Upsampler {
    /// Kernel initialized to frame duplication plus small noise, so an
    /// untrained upsampler already repeats each frame twice.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, width: usize, kernel: usize, noise: f64) -> Self {
        let w = store.add(format!("{name}.w"), &[kernel, width, width], ParamKind::Weight, Init::Uniform(noise), rng);
        if !store.is_shape_only() {
            let mut data = store.entry(w).data.clone();
            for tap in duplication_taps(kernel) {
                for i in 0..width {
                    data[(tap * width + i) * width + i] += S::one();
                }
            }
            store.set(w, data);
        }
        let b = store.add(format!("{name}.b"), &[width], ParamKind::Weight, Init::Zeros, rng);
        Upsampler { w, b }
    }

    pub fn apply<S: Scalar>(&self, b: &Bound<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv_transpose_up2(b.get(self.w))?.add(b.get(self.b))
    }
}

/// Kernel taps that route input frame `i` to output frames `2i` and `2i+1`.
pub fn duplication_taps(kernel: usize) -> [usize; 2] {
    let pad = kernel / 2 - 1;
    [pad, pad + 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rand_tensor};
    use crate::rng::RngStreams;

    #[test]
    fn duplication_kernel_repeats_frames() {
        let mut rng = RngStreams::new(1).stream("init");
        let mut store = ParamStore::<f64>::new();
        let up = Upsampler::new(&mut store, &mut rng, "up", 3, 4, 0.0);
        let x = rand_tensor(&[5, 3], &mut rng);
        let y = up.apply(&store.bind_frozen(), &x).unwrap();
        assert_eq!(y.shape(), &[10, 3]);
        for t in 0..10 {
            assert_eq!(&y.data()[t * 3..t * 3 + 3], &x.data()[(t / 2) * 3..(t / 2) * 3 + 3]);
        }
    }

    #[test]
    fn upsample_gradcheck() {
        let mut rng = RngStreams::new(2).stream("init");
        let x = rand_tensor(&[3, 2], &mut rng);
        let w = rand_tensor(&[4, 2, 2], &mut rng);
        let bias = rand_tensor(&[2], &mut rng);
        let err = check_gradients(&[x, w, bias], |v| Ok(v[0].conv_transpose_up2(&v[1])?.add(&v[2])?.square().sum()));
        assert!(err < 1e-6, "{err}");
    }
}

//! Central finite-difference gradient checking in double precision.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Standard-normal constant tensor.
pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with respect to every input.
///
/// Returns the norm-wise relative error
/// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`, with the
/// norms taken over all inputs jointly.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_gradients_step(inputs, f, DEFAULT_STEP)
}

pub fn check_gradients_step<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(Tensor::with_grad).collect();
    let loss = f(&leaves).expect("gradcheck function failed");
    loss.backward().expect("scalar loss");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> f64 {
        let args: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = t.to_vec();
                    d[idx] += delta;
                    Tensor::new(t.shape(), d).unwrap()
                } else {
                    t.detach()
                }
            })
            .collect();
        f(&args).expect("gradcheck function failed").item()
    };

    let mut diff = 0.0f64;
    let mut scale = 1e-8f64;
    for (which, input) in inputs.iter().enumerate() {
        for (idx, &a) in analytic[which].iter().enumerate().take(input.numel()) {
            let n = (eval(which, idx, step) - eval(which, idx, -step)) / (2.0 * step);
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    diff / scale
}

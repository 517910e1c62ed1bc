//! DDPM schedules and posterior steps, the duplex noise-prediction
//! training step and the ancestral sampler.

mod schedule;

use std::rc::Rc;

use rand::Rng as _;
use rand_distr::StandardNormal;

pub use schedule::{Schedule, ScheduleKind, ScheduleSpec};

use crate::error::{config_err, Result};
use crate::model::{DuplexModel, Seqs, Side};
use crate::params::{Bound, Ctx};
use crate::rdc::Direction;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Standard-normal tensor.
pub fn gaussian<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Per-direction schedules and loss interpolation weights.
#[derive(Debug, Clone)]
pub struct DdmSetup {
    pub sched_x: Schedule,
    pub sched_y: Schedule,
    /// Weight of the X-side (reverse-direction) noise loss.
    pub lambda1: f64,
    /// Weight of the Y-side (forward-direction) noise loss.
    pub lambda2: f64,
}

impl DdmSetup {
    pub fn new(sched_x: Schedule, sched_y: Schedule, lambda1: f64, lambda2: f64) -> Result<Self> {
        if sched_x.steps() != sched_y.steps() {
            return Err(config_err(format!(
                "both directions must share the step count, got {} and {}",
                sched_x.steps(),
                sched_y.steps()
            )));
        }
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(config_err("loss interpolation weights must be non-negative"));
        }
        Ok(DdmSetup {
            sched_x,
            sched_y,
            lambda1,
            lambda2,
        })
    }

    pub fn steps(&self) -> usize {
        self.sched_x.steps()
    }

    pub fn schedule(&self, side: Side) -> &Schedule {
        match side {
            Side::X => &self.sched_x,
            Side::Y => &self.sched_y,
        }
    }
}

/// Loss of one duplex noise-prediction step, with its two halves.
#[derive(Debug, Clone)]
pub struct DdmLoss<S: Scalar> {
    pub loss: Tensor<S>,
    pub t: usize,
    pub mse_x: f64,
    pub mse_y: f64,
}

/// One duplex diffusion training step on a batch of pairs.
///
/// A single step `t` is drawn for both directions. The clean canvases act
/// as fixed data: no gradient reaches the encoders through them.
pub fn ddm_train_step<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    ctx: &Ctx,
    setup: &DdmSetup,
    src: Seqs<'_>,
    tgt: Seqs<'_>,
    rng: &mut Rng,
) -> Result<DdmLoss<S>> {
    let (x0, seg_x) = model.canvas(b, Side::X, src)?;
    let (y0, seg_y) = model.canvas(b, Side::Y, tgt)?;
    ddm_step_on_canvases(model, b, ctx, setup, (&x0.detach(), seg_x), (&y0.detach(), seg_y), rng)
}

/// [`ddm_train_step`] on already encoded canvases.
pub fn ddm_step_on_canvases<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    ctx: &Ctx,
    setup: &DdmSetup,
    (x0, seg_x): (&Tensor<S>, Rc<[usize]>),
    (y0, seg_y): (&Tensor<S>, Rc<[usize]>),
    rng: &mut Rng,
) -> Result<DdmLoss<S>> {
    let t = rng.random_range(1..=setup.steps());
    let eps_x = gaussian::<S>(x0.shape(), rng);
    let eps_y = gaussian::<S>(y0.shape(), rng);
    let xt = setup.sched_x.q_sample(x0, t, &eps_x)?;
    let yt = setup.sched_y.q_sample(y0, t, &eps_y)?;
    let hat_x = model.denoise(b, ctx, Direction::Reverse, &xt, seg_x.clone(), t, y0, &seg_y)?;
    let hat_y = model.denoise(b, ctx, Direction::Forward, &yt, seg_y.clone(), t, x0, &seg_x)?;
    let mse_x = hat_x.sub(&eps_x)?.square().mean();
    let mse_y = hat_y.sub(&eps_y)?.square().mean();
    let (vx, vy) = (mse_x.item().f64(), mse_y.item().f64());
    let loss = mse_x.scale(setup.lambda1).add(&mse_y.scale(setup.lambda2))?;
    Ok(DdmLoss {
        loss,
        t,
        mse_x: vx,
        mse_y: vy,
    })
}

/// Ancestral sampling of the canvas opposite `memory`.
///
/// `dir` names the direction being generated: `Forward` samples the Y side
/// conditioned on an X-side memory. Starts from `N(0, I)` of
/// `target_segments` lengths and iterates the posterior step down to `t = 1`.
pub fn ancestral_sample<S: Scalar>(
    model: &DuplexModel,
    b: &Bound<S>,
    sched: &Schedule,
    dir: Direction,
    memory: &Tensor<S>,
    memory_segments: &[usize],
    target_segments: Rc<[usize]>,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    let ctx = Ctx::eval();
    let rows: usize = target_segments.iter().sum();
    let shape = [rows, model.hidden()];
    sample_with(sched, &shape, rng, |xt, t| {
        model.denoise(b, &ctx, dir, xt, target_segments.clone(), t, memory, memory_segments)
    })
}

/// The reverse chain with an arbitrary noise predictor.
pub fn sample_with<S: Scalar>(
    sched: &Schedule,
    shape: &[usize],
    rng: &mut Rng,
    mut predict: impl FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
) -> Result<Tensor<S>> {
    let mut x = gaussian::<S>(shape, rng);
    for t in (1..=sched.steps()).rev() {
        let eps = predict(&x, t)?;
        let next = sched.posterior_step(x.data(), eps.data(), t, rng)?;
        x = Tensor::new(shape, next)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::model::ModelConfig;
    use crate::rdc::testutil::small_cfg;
    use crate::rng::RngStreams;

    fn setup(steps: usize) -> DdmSetup {
        let s = Schedule::new(ScheduleKind::Linear, steps, 0.05, 0.3).unwrap();
        DdmSetup::new(s.clone(), s, 0.5, 0.5).unwrap()
    }

    #[test]
    fn mismatched_steps_rejected() {
        let a = Schedule::new(ScheduleKind::Linear, 3, 0.1, 0.2).unwrap();
        let b = Schedule::new(ScheduleKind::Linear, 4, 0.1, 0.2).unwrap();
        assert_eq!(DdmSetup::new(a, b, 0.5, 0.5).unwrap_err().kind(), "config");
    }

    #[test]
    fn recorded_trajectory_is_inverted_exactly() {
        let sched = ScheduleSpec::DESK.build().unwrap();
        let mut rng = RngStreams::new(1).stream("t");
        let x0 = rand_tensor(&[4, 3], &mut rng);
        // Forward chain with recorded per-step noise.
        let mut xs = vec![x0.to_f64_vec()];
        let mut noises = Vec::new();
        for t in 1..=sched.steps() {
            let e = rand_tensor(&[4, 3], &mut rng).to_f64_vec();
            let prev = xs.last().unwrap();
            let a = sched.alpha(t).unwrap();
            xs.push(prev.iter().zip(&e).map(|(p, n)| a.sqrt() * p + (1.0 - a).sqrt() * n).collect());
            noises.push(e);
        }
        // The ε that maps x_t back to x_{t-1} through the posterior mean.
        let mut x = xs[sched.steps()].clone();
        for t in (1..=sched.steps()).rev() {
            let (a, ab) = (sched.alpha(t).unwrap(), sched.alpha_bar(t).unwrap());
            let c = (1.0 - a) / (1.0 - ab).sqrt();
            let eps: Vec<f64> = x.iter().zip(&xs[t - 1]).map(|(xt, xp)| (xt - a.sqrt() * xp) / c).collect();
            x = sched.posterior_mean(&x, &eps, t).unwrap();
        }
        let err = x.iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn single_step_chain_is_one_deterministic_inversion() {
        let sched = Schedule::new(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        let mut rng = RngStreams::new(2).stream("t");
        let mut replay = rng.clone();
        let eps = rand_tensor(&[2, 2], &mut RngStreams::new(3).stream("e"));
        let out = sample_with(&sched, &[2, 2], &mut rng, |_, _| Ok(eps.clone())).unwrap();
        let start = gaussian::<f64>(&[2, 2], &mut replay);
        let want = sched.posterior_mean(start.data(), eps.data(), 1).unwrap();
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn exact_noise_at_first_step_recovers_x0() {
        let sched = Schedule::new(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        let mut rng = RngStreams::new(2).stream("t");
        let x0 = rand_tensor(&[2, 2], &mut rng);
        let eps = rand_tensor(&[2, 2], &mut rng);
        let x1 = sched.q_sample(&x0, 1, &eps).unwrap();
        let back = sched.posterior_step(x1.data(), eps.data(), 1, &mut rng).unwrap();
        let err = back.iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn zero_denoiser_loss_is_noise_energy() {
        let cfg = ModelConfig {
            vocab_x: 4,
            vocab_y: 4,
            stack: small_cfg(8, 2),
            ..ModelConfig::default()
        };
        let (m, mut store) = DuplexModel::new::<f64>(&cfg, 3).unwrap();
        for lin in [&m.ddm.eps_x, &m.ddm.eps_y] {
            store.set(lin.w, vec![0.0; 64]);
        }
        let b = store.bind_frozen();
        let src: &[&[usize]] = &[&[1, 2, 3]];
        let tgt: &[&[usize]] = &[&[0, 1]];
        let mut rng = RngStreams::new(4).stream("diffusion-noise");
        let mut replay = rng.clone();
        let out = ddm_train_step(&m, &b, &Ctx::eval(), &setup(10), src, tgt, &mut rng).unwrap();
        let _t: usize = replay.random_range(1..=10);
        let ex = gaussian::<f64>(&[6, 8], &mut replay);
        let ey = gaussian::<f64>(&[4, 8], &mut replay);
        let want = 0.5 * ex.square().mean().item() + 0.5 * ey.square().mean().item();
        assert!((out.loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn step_is_deterministic_and_interpolated() {
        let cfg = ModelConfig {
            vocab_x: 4,
            vocab_y: 4,
            stack: small_cfg(8, 2),
            ..ModelConfig::default()
        };
        let (m, store) = DuplexModel::new::<f64>(&cfg, 5).unwrap();
        let b = store.bind_frozen();
        let mut rng = RngStreams::new(6).stream("t");
        let a = rand_tensor(&[4, 8], &mut rng);
        let c = rand_tensor(&[4, 8], &mut rng);
        let seg: Rc<[usize]> = vec![4].into();
        let st = setup(5);
        let run = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut r = RngStreams::new(7).stream("n");
            ddm_step_on_canvases(&m, &b, &Ctx::eval(), &st, (x, seg.clone()), (y, seg.clone()), &mut r).unwrap()
        };
        let one = run(&a, &c);
        let two = run(&a, &c);
        assert_eq!(one.loss.item(), two.loss.item());
        assert!(one.loss.item().is_finite() && one.loss.item() >= 0.0);
        assert!((one.loss.item() - 0.5 * (one.mse_x + one.mse_y)).abs() < 1e-12);
    }
}

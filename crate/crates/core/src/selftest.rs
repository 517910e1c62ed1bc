//! Structural property suites shared by the `selftest` command and the
//! acceptance run: stack invertibility, palindromic sub-module order,
//! schedule identities, diffusion trajectories, CTC against exhaustive
//! enumeration and finite-difference gradients.

use serde::Serialize;

use crate::diffusion::{Schedule, ScheduleKind, ScheduleSpec};
use crate::error::Result;
use crate::gradcheck::{check_gradients, rand_tensor};
use crate::losses::ctc_oracle::brute_force_nll;
use crate::losses::{composite_loss_with, ctc_loss, ctc_nll, fba_loss, mse_loss, required_frames, LossMode, LossWeights};
use crate::model::{DuplexModel, ModelConfig};
use crate::params::{perturb, Ctx, ParamKind, ParamStore};
use crate::rdc::{attention_core, chain_string, Direction, DuplexStack, RdcConfig, SplitState};
use crate::rng::RngStreams;
use crate::tensor::Tensor;

/// Outcome of one suite: the worst observed value against its bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }
}

pub const INVERT_LAYERS: [usize; 4] = [2, 4, 8, 12];
pub const INVERT_HIDDEN: [usize; 2] = [32, 64];
pub const INVERT_TIME: [usize; 2] = [8, 32];

fn invert_cfg(hidden: usize, layers: usize) -> RdcConfig {
    RdcConfig {
        hidden,
        layers,
        heads: 4,
        kernel: 5,
        ffn_mult: 4,
        dropout: 0.0,
        max_rel: 16,
    }
}

/// Worst round-trip errors `(double, single)` of one seeded draw, over
/// both composition orders.
pub fn invertibility_draw(hidden: usize, layers: usize, time: usize, seed: u64) -> Result<(f64, f64)> {
    let streams = RngStreams::new(seed);
    let mut store = ParamStore::<f64>::new();
    let stack = DuplexStack::new(&mut store, &mut streams.stream("init"), "stack", &invert_cfg(hidden, layers))?;
    perturb(&mut store, seed, 0.1);
    let x = rand_tensor(&[time, hidden], &mut streams.stream("input"));
    let ctx = Ctx::eval();

    let b = store.bind_frozen();
    let x64 = SplitState::split(&x)?;
    let mut e64 = 0.0f64;
    let single = store.cast::<f32>();
    let b32 = single.bind_frozen();
    let x32 = SplitState::split(&Tensor::<f32>::from_f64(&[time, hidden], &x.to_f64_vec())?)?;
    let mut e32 = 0.0f64;
    for dir in [Direction::Forward, Direction::Reverse] {
        let y = stack.map(&b, &ctx, x64.clone(), dir)?;
        e64 = e64.max(stack.map(&b, &ctx, y, dir.flip())?.max_abs_diff(&x64));
        let y = stack.map(&b32, &ctx, x32.clone(), dir)?;
        e32 = e32.max(stack.map(&b32, &ctx, y, dir.flip())?.max_abs_diff(&x32));
    }
    Ok((e64, e32))
}

/// `draws` seeded draws cycling through the layer/width/length grid.
pub fn invertibility_suite(draws: usize) -> Result<Vec<Check>> {
    let mut grid = Vec::new();
    for &l in &INVERT_LAYERS {
        for &h in &INVERT_HIDDEN {
            for &t in &INVERT_TIME {
                grid.push((h, l, t));
            }
        }
    }
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    let (mut at64, mut at32) = (String::new(), String::new());
    for i in 0..draws {
        let (h, l, t) = grid[i % grid.len()];
        let (e64, e32) = invertibility_draw(h, l, t, 1000 + i as u64)?;
        if e64 >= w64 {
            w64 = e64;
            at64 = format!("L={l} h={h} time={t}");
        }
        if e32 >= w32 {
            w32 = e32;
            at32 = format!("L={l} h={h} time={t}");
        }
    }
    Ok(vec![
        Check::at_most("invertibility (double)", w64, 1e-8, format!("{draws} draws, worst at {at64}")),
        Check::at_most("invertibility (single)", w32, 1e-4, format!("{draws} draws, worst at {at32}")),
    ])
}

/// Forward and reverse sub-module traces of an `L`-layer stack, as symbol
/// strings with a space between layer applications.
pub fn chains(layers: usize) -> Result<(String, String)> {
    let streams = RngStreams::new(layers as u64);
    let mut store = ParamStore::<f64>::new();
    let stack = DuplexStack::new(&mut store, &mut streams.stream("init"), "stack", &invert_cfg(8, layers))?;
    let b = store.bind_frozen();
    let x = SplitState::split(&rand_tensor(&[3, 8], &mut streams.stream("input")))?;
    let ctx = Ctx::eval().with_trace();
    stack.map(&b, &ctx, x.clone(), Direction::Forward)?;
    let fwd = chain_string(&ctx.take_trace());
    stack.map(&b, &ctx, x, Direction::Reverse)?;
    let rev = chain_string(&ctx.take_trace());
    Ok((fwd, rev))
}

pub fn is_mirror(fwd: &str, rev: &str) -> bool {
    fwd.chars().eq(rev.chars().rev())
}

pub fn palindrome_suite(depths: &[usize]) -> Result<Check> {
    let mut bad = Vec::new();
    for &l in depths {
        let (f, r) = chains(l)?;
        if !is_mirror(&f, &r) || f.chars().filter(|c| *c != ' ').count() != 4 * l {
            bad.push(l);
        }
    }
    Ok(Check {
        name: "palindrome traces".into(),
        passed: bad.is_empty(),
        value: bad.len() as f64,
        tolerance: 0.0,
        detail: format!("depths {depths:?}, mismatched {bad:?}"),
    })
}

/// Worst `|1−ᾱ_t − (α_t(1−ᾱ_{t−1}) + β_t)|` over every step of the named
/// presets and both schedule kinds at their ranges, with `β̃_1`.
pub fn schedule_suite() -> Result<Check> {
    let mut specs = vec![ScheduleSpec::REFERENCE, ScheduleSpec::DESK];
    for base in [ScheduleSpec::REFERENCE, ScheduleSpec::DESK] {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            specs.push(ScheduleSpec { kind, ..base });
        }
    }
    let mut worst = 0.0f64;
    let mut tilde1 = 0.0f64;
    for spec in specs {
        let s: Schedule = spec.build()?;
        worst = worst.max(s.identity_residual());
        tilde1 = tilde1.max(s.beta_tilde(1)?.abs());
    }
    Ok(Check::at_most(
        "schedule identity",
        worst.max(tilde1),
        1e-12,
        format!("identity residual {worst:.3e}, beta_tilde(1) {tilde1:.3e}"),
    ))
}

/// Every target of length ≤ `max_target` over `classes − 1` labels.
fn targets(labels: usize, max_target: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_target {
        let mut next = Vec::new();
        for t in &frontier {
            for u in 0..labels {
                let mut v: Vec<usize> = t.clone();
                v.push(u);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Row-normalized random log-probabilities.
pub fn random_log_probs(frames: usize, classes: usize, seed: u64) -> Vec<f64> {
    let logits = rand_tensor(&[frames, classes], &mut RngStreams::new(seed).stream("ctc"));
    logits.log_softmax_rows().expect("non-empty rows").to_f64_vec()
}

/// DP against exhaustive enumeration for every `T ≤ max_t`,
/// `|V| ≤ max_v`, `|y| ≤ max_y`. Infeasible targets must be reported as
/// such by the DP and have zero enumerated mass.
pub fn ctc_grid(max_t: usize, max_v: usize, max_y: usize) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for frames in 1..=max_t {
        for labels in 1..=max_v {
            let classes = labels + 1;
            let blank = labels;
            let lp = random_log_probs(frames, classes, (frames * 10 + labels) as u64);
            for y in targets(labels, max_y) {
                cases += 1;
                let oracle = brute_force_nll(&lp, frames, classes, &y, blank);
                if required_frames(&y) > frames {
                    let infeasible = matches!(
                        ctc_nll(&lp, frames, classes, &y, blank),
                        Err(crate::Error::InfeasibleAlignment { .. })
                    );
                    if !infeasible || oracle.is_finite() {
                        worst = f64::INFINITY;
                    }
                    continue;
                }
                let dp = ctc_nll(&lp, frames, classes, &y, blank)?;
                worst = worst.max((dp - oracle).abs());
            }
        }
    }
    Ok((worst, cases))
}

/// The two closed-form values: one frame, one label, uniform → `ln 2`; two
/// frames → `−ln 0.75`.
pub fn ctc_analytic() -> Result<(f64, f64)> {
    let one = vec![0.5f64.ln(); 2];
    let two = vec![0.5f64.ln(); 4];
    Ok((ctc_nll(&one, 1, 2, &[0], 1)?, ctc_nll(&two, 2, 2, &[0], 1)?))
}

pub fn ctc_suite() -> Result<Check> {
    let (worst, cases) = ctc_grid(6, 3, 3)?;
    let (a, b) = ctc_analytic()?;
    let analytic_ok = format!("{a:.6}") == format!("{:.6}", 2f64.ln()) && format!("{b:.6}") == format!("{:.6}", -0.75f64.ln());
    let mut c = Check::at_most(
        "ctc vs enumeration",
        worst,
        1e-10,
        format!("{cases} cases; ln2 -> {a:.6}, -ln0.75 -> {b:.6}"),
    );
    c.passed &= analytic_ok;
    Ok(c)
}

/// Invert a forward chain whose per-step noise was recorded, stepping back
/// through the posterior mean with the noise that reproduces `x_{t-1}`.
/// Returns the max-abs error against `x_0`.
pub fn trajectory_inversion(spec: ScheduleSpec, seed: u64) -> Result<f64> {
    let sched = spec.build()?;
    let mut rng = RngStreams::new(seed).stream("trajectory");
    let x0 = rand_tensor(&[4, 3], &mut rng).to_f64_vec();
    let mut xs = vec![x0.clone()];
    for t in 1..=sched.steps() {
        let e = rand_tensor(&[4, 3], &mut rng).to_f64_vec();
        let a = sched.alpha(t)?;
        let prev = &xs[t - 1];
        let next = prev.iter().zip(&e).map(|(p, n)| a.sqrt() * p + (1.0 - a).sqrt() * n).collect();
        xs.push(next);
    }
    let mut x = xs[sched.steps()].clone();
    for t in (1..=sched.steps()).rev() {
        let (a, ab) = (sched.alpha(t)?, sched.alpha_bar(t)?);
        let c = (1.0 - a) / (1.0 - ab).sqrt();
        let eps: Vec<f64> = x.iter().zip(&xs[t - 1]).map(|(xt, xp)| (xt - a.sqrt() * xp) / c).collect();
        x = sched.posterior_mean(&x, &eps, t)?;
    }
    Ok(x.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Worst relative error of the sample variance of `q(x_t | x_0)` against
/// `1 − ᾱ_t`, at a few steps of the desk schedule.
pub fn q_sample_variance(samples: usize, seed: u64) -> Result<f64> {
    let sched = ScheduleSpec::DESK.build()?;
    let mut rng = RngStreams::new(seed).stream("monte-carlo");
    let x0 = Tensor::<f64>::full(&[samples], 0.7);
    let mut worst = 0.0f64;
    for t in [1, sched.steps() / 4, sched.steps() / 2, sched.steps()] {
        let eps = crate::diffusion::gaussian::<f64>(&[samples], &mut rng);
        let xt = sched.q_sample(&x0, t, &eps)?.to_f64_vec();
        let mean = xt.iter().sum::<f64>() / samples as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (samples - 1) as f64;
        let want = 1.0 - sched.alpha_bar(t)?;
        worst = worst.max((var - want).abs() / want);
    }
    Ok(worst)
}

/// Trajectory inversion on both presets and the Monte Carlo variance of
/// `q_sample`.
pub fn diffusion_suite() -> Result<Vec<Check>> {
    let inv = trajectory_inversion(ScheduleSpec::DESK, 1)?.max(trajectory_inversion(ScheduleSpec::REFERENCE, 2)?);
    let mc = q_sample_variance(200_000, 3)?;
    Ok(vec![
        Check::at_most("trajectory inversion", inv, 1e-6, "desk and reference presets".into()),
        Check::at_most("q_sample variance", mc, 0.02, "200000 draws, relative error".into()),
    ])
}

/// Projection of a tensor onto a fixed random direction, so gradients of
/// every output element are exercised.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let w = rand_tensor(y.shape(), &mut RngStreams::new(seed).stream("projection"));
    Ok(y.mul(&w)?.sum())
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>);

fn op_cases() -> Vec<OpCase> {
    use crate::tensor::NormMode;
    use std::rc::Rc;
    let m = |r: usize, c: usize| vec![r, c];
    vec![
        ("add", vec![m(3, 4), vec![4]], Box::new(|x| project(&x[0].add(&x[1])?, 1))),
        ("sub", vec![m(3, 4), m(3, 4)], Box::new(|x| project(&x[0].sub(&x[1])?, 2))),
        ("mul", vec![m(3, 4), vec![4]], Box::new(|x| project(&x[0].mul(&x[1])?, 3))),
        ("scale", vec![m(2, 3)], Box::new(|x| project(&x[0].scale(-1.7), 4))),
        ("neg", vec![m(2, 3)], Box::new(|x| project(&x[0].neg(), 5))),
        ("square", vec![m(2, 3)], Box::new(|x| project(&x[0].square(), 6))),
        ("exp", vec![m(2, 3)], Box::new(|x| project(&x[0].exp(), 7))),
        ("sigmoid", vec![m(2, 3)], Box::new(|x| project(&x[0].sigmoid(), 8))),
        ("silu", vec![m(2, 3)], Box::new(|x| project(&x[0].silu(), 9))),
        ("sum", vec![m(2, 3)], Box::new(|x| Ok(x[0].square().sum()))),
        ("mean", vec![m(2, 3)], Box::new(|x| Ok(x[0].square().mean()))),
        ("matmul", vec![m(3, 4), m(4, 2)], Box::new(|x| project(&x[0].matmul(&x[1])?, 10))),
        ("linear", vec![m(3, 4), m(4, 2), vec![2]], Box::new(|x| project(&x[0].linear(&x[1], Some(&x[2]))?, 11))),
        ("transpose", vec![m(3, 4)], Box::new(|x| project(&x[0].transpose()?, 12))),
        ("reshape", vec![m(3, 4)], Box::new(|x| project(&x[0].reshape(&[2, 6])?, 13))),
        ("narrow_cols", vec![m(3, 5)], Box::new(|x| project(&x[0].narrow_cols(1, 3)?, 14))),
        ("concat_cols", vec![m(3, 2), m(3, 3)], Box::new(|x| project(&Tensor::concat_cols(&[x[0].clone(), x[1].clone()])?, 15))),
        ("narrow_rows", vec![m(5, 2)], Box::new(|x| project(&x[0].narrow_rows(1, 3)?, 16))),
        ("concat_rows", vec![m(2, 3), m(1, 3)], Box::new(|x| project(&Tensor::concat_rows(&[x[0].clone(), x[1].clone()])?, 17))),
        ("index_rows", vec![m(4, 3)], Box::new(|x| project(&x[0].index_rows(&[2, 0, 2, 3])?, 18))),
        (
            "gather",
            vec![m(3, 3)],
            Box::new(|x| project(&x[0].gather(Rc::from(vec![8usize, 0, 4, 4, 1]), &[5])?, 19)),
        ),
        ("layer_norm", vec![m(3, 4), vec![4], vec![4]], Box::new(|x| project(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, 20))),
        (
            "softmax_rows",
            vec![m(3, 4)],
            Box::new(|x| {
                let mask = [true, false, true, true];
                project(&x[0].softmax_rows(Some(&mask))?, 21)
            }),
        ),
        ("log_softmax_rows", vec![m(3, 4)], Box::new(|x| project(&x[0].log_softmax_rows()?, 22))),
        ("glu", vec![m(3, 4)], Box::new(|x| project(&x[0].glu()?, 23))),
        ("conv1d_depthwise", vec![m(5, 3), m(3, 3)], Box::new(|x| project(&x[0].conv1d_depthwise(&x[1])?, 24))),
        (
            "conv1d_depthwise_packed",
            vec![m(7, 3), m(3, 3)],
            Box::new(|x| project(&x[0].conv1d_depthwise_packed(&x[1], &[2, 1, 4])?, 25)),
        ),
        ("conv1d_pointwise", vec![m(4, 3), m(3, 2)], Box::new(|x| project(&x[0].conv1d_pointwise(&x[1])?, 26))),
        ("conv_transpose_up2", vec![m(3, 2), vec![4, 2, 2]], Box::new(|x| project(&x[0].conv_transpose_up2(&x[1])?, 27))),
        (
            "batch_norm (batch)",
            vec![m(5, 3), vec![3], vec![3]],
            Box::new(|x| project(&x[0].batch_norm(&x[1], &x[2], NormMode::Batch, 1e-5)?.0, 28)),
        ),
        (
            "batch_norm (running)",
            vec![m(5, 3), vec![3], vec![3]],
            Box::new(|x| {
                let mode = NormMode::Running { mean: &[0.1, -0.2, 0.3], var: &[1.5, 0.5, 2.0] };
                project(&x[0].batch_norm(&x[1], &x[2], mode, 1e-5)?.0, 29)
            }),
        ),
        (
            "dropout",
            vec![m(4, 4)],
            Box::new(|x| project(&x[0].dropout(0.3, true, &mut RngStreams::new(30).stream("dropout"))?, 30)),
        ),
        ("cosine_similarity", vec![m(3, 4), m(3, 4)], Box::new(|x| x[0].cosine_similarity(&x[1]))),
        (
            "attention_core",
            vec![m(3, 4), m(5, 4), m(5, 4), m(5, 2)],
            Box::new(|x| project(&attention_core(&x[0], &x[1], &x[2], &x[3], 2, 3)?, 31)),
        ),
        ("mse_loss", vec![m(3, 4), m(3, 4)], Box::new(|x| mse_loss(&x[0], &x[1]))),
        (
            // The reverse side sits behind a stop-gradient, so only the
            // forward side is perturbed.
            "fba_loss",
            vec![m(3, 4), m(3, 4)],
            Box::new(|x| {
                let mut rng = RngStreams::new(32).stream("fba");
                let rev = [rand_tensor(&[3, 4], &mut rng), rand_tensor(&[3, 4], &mut rng)];
                fba_loss(x, &rev)
            }),
        ),
        (
            "ctc_loss",
            vec![m(7, 3)],
            Box::new(|x| ctc_loss(&x[0].log_softmax_rows()?, &[&[0, 1], &[1, 1]], &[3, 4], 2)),
        ),
    ]
}

/// Finite differences against reverse mode for every differentiable op and
/// for the composite loss of a tiny model, in double precision.
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    let mut at = "";
    let cases = op_cases();
    for (i, (name, shapes, f)) in cases.iter().enumerate() {
        let mut rng = RngStreams::new(100 + i as u64).stream("gradcheck");
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let err = check_gradients(&inputs, |x| f(x));
        if err >= worst {
            worst = err;
            at = name;
        }
    }
    let ops = Check::at_most("gradients (ops)", worst, 1e-5, format!("{} ops, worst {at}", cases.len()));
    let composite = composite_gradcheck(&LossWeights::default())?;
    Ok(vec![
        ops,
        Check::at_most("gradients (composite loss)", composite, 1e-5, "tiny model, every trainable weight".into()),
    ])
}

/// Relative gradient error of the composite loss with respect to every
/// trainable weight of a tiny perturbed model, with the stop-gradient
/// partners held at their unperturbed values.
pub fn composite_gradcheck(weights: &LossWeights) -> Result<f64> {
    let cfg = ModelConfig {
        vocab_x: 3,
        vocab_y: 3,
        stack: RdcConfig {
            hidden: 4,
            layers: 2,
            heads: 2,
            kernel: 3,
            ffn_mult: 4,
            dropout: 0.0,
            max_rel: 8,
        },
        ..ModelConfig::default()
    };
    let (model, mut store) = DuplexModel::new::<f64>(&cfg, 11)?;
    perturb(&mut store, 11, 0.1);
    let ids: Vec<_> = store
        .entries()
        .iter()
        .filter(|e| e.kind == ParamKind::Weight && !e.name.starts_with(crate::model::DDM_PREFIX))
        .map(|e| store.id(&e.name))
        .collect::<Option<Vec<_>>>()
        .expect("names resolve");
    let inputs: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| Tensor::new(&store.entry(id).shape, store.entry(id).data.clone()))
        .collect::<Result<_>>()?;
    let src: &[&[usize]] = &[&[0, 1, 2], &[2, 2]];
    let tgt: &[&[usize]] = &[&[1, 0], &[0, 2]];
    let fixed = store.bind_frozen();
    Ok(check_gradients(&inputs, |x| {
        let b = store.bind_frozen().with_overrides(&ids, x);
        Ok(composite_loss_with(&model, &b, Some(&fixed), &Ctx::eval(), src, tgt, weights, LossMode::Unit)?.0)
    }))
}

/// Every suite at the sizes the `selftest` command uses.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = invertibility_suite(100)?;
    out.push(palindrome_suite(&[2, 4, 6, 8, 12, 18])?);
    out.push(schedule_suite()?);
    out.extend(diffusion_suite()?);
    out.push(ctc_suite()?);
    out.extend(gradient_suite()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_targets_are_complete() {
        assert_eq!(targets(2, 2).len(), 1 + 2 + 4);
        assert_eq!(targets(3, 3).len(), 1 + 3 + 9 + 27);
    }

    #[test]
    fn chains_for_four_layers() {
        let (f, r) = chains(4).unwrap();
        assert_eq!(f, "fcmf fcmf fmcf fmcf");
        assert!(is_mirror(&f, &r));
        assert!(!is_mirror("fmc", "fmc"));
    }

    #[test]
    fn small_suites_pass() {
        assert!(schedule_suite().unwrap().passed);
        assert!(ctc_suite().unwrap().passed);
        for c in diffusion_suite().unwrap() {
            assert!(c.passed, "{c:?}");
        }
        for c in invertibility_suite(4).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}

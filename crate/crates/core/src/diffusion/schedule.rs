use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `β_t` evenly spaced.
    Linear,
    /// `√β_t` evenly spaced.
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "scaled_linear" => Ok(ScheduleKind::ScaledLinear),
            other => Err(config_err(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Parameters from which a schedule is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// 1000-step stable-diffusion-style schedule.
    pub const REFERENCE: ScheduleSpec = ScheduleSpec {
        kind: ScheduleKind::ScaledLinear,
        steps: 1000,
        beta_start: 8.5e-4,
        beta_end: 1.2e-2,
    };

    /// 50-step schedule whose endpoint noise level is close to the
    /// reference schedule's, for fast tests and desk-scale training.
    pub const DESK: ScheduleSpec = ScheduleSpec {
        kind: ScheduleKind::ScaledLinear,
        steps: 50,
        beta_start: 0.017,
        beta_end: 0.24,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::REFERENCE),
            "desk" => Ok(Self::DESK),
            other => Err(config_err(format!("unknown schedule preset {other:?}"))),
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Variance schedule `β_1..β_T` with derived `α_t`, `ᾱ_t` and posterior
/// variances. Steps are 1-based; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("diffusion schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err(format!(
                "schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (steps - 1) as f64
            }
        };
        let beta = (0..steps)
            .map(|i| match kind {
                ScheduleKind::Linear => lerp(beta_start, beta_end, i),
                ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();
        Ok(Self::from_betas(kind, beta))
    }

    pub(crate) fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Schedule { kind, beta, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { t, steps: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// Posterior variance `β̃_t = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`.
    pub fn beta_tilde(&self, t: usize) -> Result<f64> {
        let (ab, ab_prev) = (self.alpha_bar(t)?, self.alpha_bar(t - 1)?);
        Ok((1.0 - ab_prev) / (1.0 - ab) * self.beta(t)?)
    }

    /// Closed-form diffused sample `√ᾱ_t x0 + √(1-ᾱ_t) ε`.
    pub fn q_sample<S: Scalar>(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        if x0.shape() != eps.shape() {
            return Err(shape_err("q_sample", x0.shape(), eps.shape()));
        }
        self.check(t)?;
        let ab = self.alpha_bar(t)?;
        x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
    }

    /// Posterior mean `μ̃_t = (x_t - (1-α_t)/√(1-ᾱ_t) ε̂) / √α_t`.
    pub fn posterior_mean<S: Scalar>(&self, xt: &[S], eps_hat: &[S], t: usize) -> Result<Vec<S>> {
        if xt.len() != eps_hat.len() {
            return Err(shape_err("posterior_mean", &[xt.len()], &[eps_hat.len()]));
        }
        let (a, ab) = (self.alpha(t)?, self.alpha_bar(t)?);
        let c = (1.0 - a) / (1.0 - ab).sqrt();
        let inv = 1.0 / a.sqrt();
        Ok(xt
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| S::of((x.f64() - c * e.f64()) * inv))
            .collect())
    }

    /// One ancestral step `x_{t-1} = μ̃_t + √β̃_t z`, with `z = 0` at `t = 1`.
    pub fn posterior_step<S: Scalar>(&self, xt: &[S], eps_hat: &[S], t: usize, rng: &mut Rng) -> Result<Vec<S>> {
        let mut mean = self.posterior_mean(xt, eps_hat, t)?;
        if t > 1 {
            let sd = self.beta_tilde(t)?.sqrt();
            for m in &mut mean {
                let z: f64 = rng.sample(StandardNormal);
                *m = S::of(m.f64() + sd * z);
            }
        }
        Ok(mean)
    }

    /// Largest violation of `1 - ᾱ_t = α_t (1 - ᾱ_{t-1}) + β_t` over all t.
    pub fn identity_residual(&self) -> f64 {
        (1..=self.steps())
            .map(|t| {
                let lhs = 1.0 - self.alpha_bar[t - 1];
                let prev = if t == 1 { 1.0 } else { self.alpha_bar[t - 2] };
                let a = 1.0 - self.beta[t - 1];
                let rhs = a * (1.0 - prev) + self.beta[t - 1];
                (lhs - rhs).abs()
            })
            .fold(0.0, f64::max)
    }
}

//! Training losses: CTC, MSE, layer-wise forward-backward agreement and
//! cycle consistency, plus the weighted composites.

mod composite;
mod ctc;
pub mod ctc_oracle;

use serde::{Deserialize, Serialize};

pub use composite::{composite_loss, composite_loss_with, cycle_loss_units, CompositeTerms, LossMode};
pub use ctc::{ctc_loss, ctc_loss_terms, ctc_nll, required_frames, AlignmentLattice};

use crate::error::{config_err, shape_err, Result};
use crate::rdc::SplitState;
use crate::tensor::{Scalar, Tensor};

/// Weights of the six composite terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Target-side CTC/MSE for the forward direction.
    pub w1: f64,
    /// Source-side CTC/MSE for the reverse direction.
    pub w2: f64,
    /// Forward-direction agreement.
    pub w3: f64,
    /// Reverse-direction agreement.
    pub w4: f64,
    /// Source-side cycle consistency.
    pub w5: f64,
    /// Target-side cycle consistency.
    pub w6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 1.0,
            w6: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.w1, self.w2, self.w3, self.w4, self.w5, self.w6]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(config_err("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let w = self.as_array().map(|v| v * c);
        LossWeights {
            w1: w[0],
            w2: w[1],
            w3: w[2],
            w4: w[3],
            w5: w[4],
            w6: w[5],
        }
    }
}

/// Mean squared element difference.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(shape_err("mse_loss", pred.shape(), target.shape()));
    }
    Ok(pred.sub(target)?.square().mean())
}

/// Layer-wise agreement `(1/L) Σ_l (1 - cos(fwd_l, sg(rev_l)))`.
///
/// Each pair is compared as one flattened vector; no gradient reaches the
/// `rev` representations.
pub fn fba_loss<S: Scalar>(fwd: &[Tensor<S>], rev: &[Tensor<S>]) -> Result<Tensor<S>> {
    if fwd.len() != rev.len() || fwd.is_empty() {
        return Err(shape_err("fba_loss", &[fwd.len()], &[rev.len()]));
    }
    let mut total: Option<Tensor<S>> = None;
    for (a, b) in fwd.iter().zip(rev) {
        let term = Tensor::scalar(S::one()).sub(&a.cosine_similarity(&b.detach())?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / fwd.len() as f64))
}

/// Agreement between two passes given as stack states at positions
/// `1..=L`.
pub fn fba_states<S: Scalar>(fwd: &[SplitState<S>], rev: &[SplitState<S>]) -> Result<Tensor<S>> {
    let merge = |v: &[SplitState<S>]| v.iter().map(SplitState::merge).collect::<Result<Vec<_>>>();
    fba_loss(&merge(fwd)?, &merge(rev)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rand_tensor};
    use crate::rng::RngStreams;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn mse_cases() {
        let a = t(&[1.0, 2.0, 3.0]);
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(mse_loss(&t(&[2.0, 3.0, 4.0]), &a).unwrap().item(), 1.0);
        assert!(mse_loss(&a, &t(&[1.0])).is_err());
        let mut rng = RngStreams::new(1).stream("t");
        let (p, r) = (rand_tensor(&[3, 2], &mut rng), rand_tensor(&[3, 2], &mut rng));
        let err = check_gradients(&[p.clone()], |x| mse_loss(&x[0], &r));
        assert!(err < 1e-6);
        let leaf = p.with_grad();
        mse_loss(&leaf, &r).unwrap().backward().unwrap();
        for ((g, a), b) in leaf.grad().unwrap().iter().zip(p.data()).zip(r.data()) {
            assert!((g - 2.0 * (a - b) / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fba_cases() {
        let a = vec![t(&[1.0, 2.0]), t(&[0.0, 3.0])];
        let neg: Vec<_> = a.iter().map(|x| x.neg()).collect();
        let orth = vec![t(&[-2.0, 1.0]), t(&[1.0, 0.0])];
        assert!(fba_loss(&a, &a).unwrap().item().abs() < 1e-15);
        assert!((fba_loss(&a, &neg).unwrap().item() - 2.0).abs() < 1e-15);
        assert!((fba_loss(&a, &orth).unwrap().item() - 1.0).abs() < 1e-15);
        let zero = vec![t(&[0.0, 0.0]), t(&[0.0, 0.0])];
        assert_eq!(fba_loss(&a, &zero).unwrap().item(), 1.0);
    }

    #[test]
    fn fba_stops_gradient_into_reverse_side() {
        let mut rng = RngStreams::new(2).stream("t");
        let fwd = vec![rand_tensor(&[2, 3], &mut rng).with_grad()];
        let rev = vec![rand_tensor(&[2, 3], &mut rng).with_grad()];
        fba_loss(&fwd, &rev).unwrap().backward().unwrap();
        assert!(fwd[0].grad().is_some());
        assert!(rev[0].grad().map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights::default().scaled(0.0).validate().is_err());
        let mut w = LossWeights::default();
        w.w3 = -1.0;
        assert!(w.validate().is_err());
    }
}

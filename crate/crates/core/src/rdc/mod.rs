//! Reversible duplex Conformer: sub-modules, reversible blocks, the
//! palindromic stack and the length upsampler.

mod attention;
mod block;
mod cnn;
mod ffn;
mod stack;
mod upsample;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use attention::{attention_core, relative_index, AttnSource, Mhsa};
pub use block::RdcLayer;
pub use cnn::Cnn;
pub use ffn::Ffn;
pub use stack::{chain_string, Direction, DuplexStack, StackPass};
pub use upsample::Upsampler;

use crate::error::{config_err, Result};
use crate::params::{Bound, Init, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape of the reversible stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdcConfig {
    /// Model width `h`; each block half carries `h/2` channels.
    pub hidden: usize,
    /// Number of reversible layers `L` (even).
    pub layers: usize,
    pub heads: usize,
    /// Depthwise kernel width (odd).
    pub kernel: usize,
    /// FFN inner expansion factor.
    pub ffn_mult: usize,
    /// Dropout rate shared by every dropout site.
    pub dropout: f64,
    /// Relative positions beyond this distance are clipped.
    pub max_rel: usize,
}

impl Default for RdcConfig {
    fn default() -> Self {
        RdcConfig {
            hidden: 64,
            layers: 4,
            heads: 4,
            kernel: 5,
            ffn_mult: 4,
            dropout: 0.0,
            max_rel: 48,
        }
    }
}

impl RdcConfig {
    /// Conformer-Large scale preset, for parameter counting only.
    pub fn full_scale() -> Self {
        RdcConfig {
            hidden: 1024,
            layers: 18,
            heads: 8,
            kernel: 31,
            ffn_mult: 4,
            dropout: 0.1,
            max_rel: 512,
        }
    }

    pub fn half(&self) -> usize {
        self.hidden / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return Err(config_err(format!("model width {} must be even and positive", self.hidden)));
        }
        if self.layers < 2 || self.layers % 2 != 0 {
            return Err(config_err(format!("layer count {} must be even and at least 2", self.layers)));
        }
        if self.heads == 0 || self.half() % self.heads != 0 {
            return Err(config_err(format!(
                "{} heads do not divide the half width {}",
                self.heads,
                self.half()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err(format!("depthwise kernel width {} must be odd", self.kernel)));
        }
        if self.ffn_mult == 0 || self.max_rel == 0 {
            return Err(config_err("ffn_mult and max_rel must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of one layer.
    pub fn layer_param_count(&self) -> usize {
        let c = self.half();
        let m = self.ffn_mult;
        let d = c / self.heads;
        let ffn = 2 * c + 2 * m * c * c + m * c + c;
        let mhsa = 2 * c + 4 * (c * c + c) + (2 * self.max_rel - 1) * d;
        let cnn = 2 * c + (2 * c * c + 2 * c) + (c * self.kernel + c) + 2 * c + (c * c + c);
        2 * ffn + mhsa + cnn
    }

    pub fn stack_param_count(&self) -> usize {
        self.layers * self.layer_param_count()
    }
}

/// A layer activation split into its two channel halves.
///
/// Several sequences may be packed along the time axis; `segments` holds
/// their lengths. Row-wise sub-modules treat the pack as one matrix while
/// attention and convolution stay within each sequence.
#[derive(Debug, Clone)]
pub struct SplitState<S: Scalar> {
    pub h1: Tensor<S>,
    pub h2: Tensor<S>,
    pub segments: Rc<[usize]>,
}

impl<S: Scalar> SplitState<S> {
    /// Split a `[t×h]` matrix holding one sequence into `[t×h/2]` halves.
    pub fn split(x: &Tensor<S>) -> Result<Self> {
        let t = x.dims2("split")?.0;
        Self::split_packed(x, Rc::from(vec![t]))
    }

    /// Split a pack of sequences with the given lengths.
    pub fn split_packed(x: &Tensor<S>, segments: Rc<[usize]>) -> Result<Self> {
        let (t, h) = x.dims2("split")?;
        if h % 2 != 0 {
            return Err(config_err(format!("cannot split odd width {h}")));
        }
        if segments.iter().sum::<usize>() != t || segments.contains(&0) {
            return Err(crate::error::shape_err("split", x.shape(), &segments));
        }
        Ok(SplitState {
            h1: x.narrow_cols(0, h / 2)?,
            h2: x.narrow_cols(h / 2, h / 2)?,
            segments,
        })
    }

    pub fn merge(&self) -> Result<Tensor<S>> {
        Tensor::concat_cols(&[self.h1.clone(), self.h2.clone()])
    }

    /// Total packed rows.
    pub fn rows(&self) -> usize {
        self.h1.shape()[0]
    }

    pub fn detach(&self) -> Self {
        SplitState {
            h1: self.h1.detach(),
            h2: self.h2.detach(),
            segments: self.segments.clone(),
        }
    }

    /// Max-abs distance between two states of equal shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        crate::tensor::max_abs_diff(&self.h1, &other.h1).max(crate::tensor::max_abs_diff(&self.h2, &other.h2))
    }
}

/// Apply `f` to each sequence of a pack and restack the results.
pub(crate) fn per_segment<S: Scalar>(
    x: &Tensor<S>,
    segments: &[usize],
    mut f: impl FnMut(usize, &Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Tensor<S>> {
    if segments.len() == 1 {
        return f(0, x);
    }
    let mut parts = Vec::with_capacity(segments.len());
    let mut start = 0;
    for (i, &len) in segments.iter().enumerate() {
        parts.push(f(i, &x.narrow_rows(start, len)?)?);
        start += len;
    }
    Tensor::concat_rows(&parts)
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` weights, zero bias.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), &[fan_in, fan_out], ParamKind::Weight, Init::Uniform(bound), rng);
        let b = bias.then(|| store.add(format!("{name}.b"), &[fan_out], ParamKind::Weight, Init::Zeros, rng));
        Linear { w, b }
    }

    pub fn apply<S: Scalar>(&self, b: &Bound<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.linear(b.get(self.w), self.b.map(|id| b.get(id)))
    }
}

/// Layer normalization parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), &[width], ParamKind::Weight, Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), &[width], ParamKind::Weight, Init::Zeros, rng),
        }
    }

    pub fn apply<S: Scalar>(&self, b: &Bound<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(b.get(self.gain), b.get(self.bias), LN_EPS)
    }
}

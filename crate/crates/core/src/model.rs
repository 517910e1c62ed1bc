//! The duplex model: stand-in encoders, per-end upsamplers, the reversible
//! stack, per-end CTC heads and the diffusion-specific parameters.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::{Bound, Ctx, Init, ParamEntry, ParamId, ParamKind, ParamStore};
use crate::rdc::{per_segment, AttnSource, Direction, DuplexStack, Linear, RdcConfig, SplitState, StackPass, Upsampler};
use crate::rng::{Rng, RngStreams, streams};
use crate::tensor::{Scalar, Tensor};

/// Prefix of every parameter that belongs to the diffusion path only.
pub const DDM_PREFIX: &str = "ddm.";

/// Which end of the duplex network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    X,
    Y,
}

impl Side {
    /// The end a direction reads from.
    pub fn source_of(dir: Direction) -> Side {
        match dir {
            Direction::Forward => Side::X,
            Direction::Reverse => Side::Y,
        }
    }

    /// The end a direction writes to.
    pub fn target_of(dir: Direction) -> Side {
        Side::source_of(dir.flip())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Unit vocabulary of language X (blank excluded).
    pub vocab_x: usize,
    /// Unit vocabulary of language Y (blank excluded).
    pub vocab_y: usize,
    pub stack: RdcConfig,
    /// Transposed-convolution kernel width of the upsamplers (even).
    pub upsample_kernel: usize,
    /// Add fixed start- and end-relative sinusoidal features after
    /// upsampling.
    pub position_features: bool,
    /// Keep the stand-in encoder tables at their random initialization.
    pub freeze_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_x: 12,
            vocab_y: 12,
            stack: RdcConfig::default(),
            upsample_kernel: 4,
            position_features: true,
            freeze_encoders: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        if self.vocab_x < 1 || self.vocab_y < 1 {
            return Err(config_err("vocabularies must be non-empty"));
        }
        if self.upsample_kernel < 2 || self.upsample_kernel % 2 != 0 {
            return Err(config_err(format!("upsampling kernel width {} must be even and at least 2", self.upsample_kernel)));
        }
        Ok(())
    }

    pub fn vocab(&self, side: Side) -> usize {
        match side {
            Side::X => self.vocab_x,
            Side::Y => self.vocab_y,
        }
    }

    /// Closed-form trainable parameter count of the whole model.
    pub fn param_count(&self) -> usize {
        let h = self.stack.hidden;
        let c = self.stack.half();
        let k = self.upsample_kernel;
        let embed = (self.vocab_x + self.vocab_y) * h;
        let up = 2 * (k * h * h + h);
        let heads = (h + 1) * (self.vocab_x + 1) + (h + 1) * (self.vocab_y + 1);
        let ddm = (h * h + h) + 2 * (h * c + c) + 2 * (h * h + h);
        embed + up + self.stack.stack_param_count() + heads + ddm
    }
}

/// Parameters used only by the diffusion path.
#[derive(Debug, Clone)]
pub struct DdmParams {
    /// Maps the sinusoidal step features to model width.
    pub time: Linear,
    /// Projects the clean X-side memory for the forward denoiser.
    pub mem_fwd: Linear,
    /// Projects the clean Y-side memory for the reverse denoiser.
    pub mem_rev: Linear,
    pub eps_x: Linear,
    pub eps_y: Linear,
}

#[derive(Debug, Clone)]
pub struct DuplexModel {
    pub cfg: ModelConfig,
    pub embed_x: ParamId,
    pub embed_y: ParamId,
    pub up_x: Upsampler,
    pub up_y: Upsampler,
    pub stack: DuplexStack,
    pub head_x: Linear,
    pub head_y: Linear,
    pub ddm: DdmParams,
}

/// Token sequences packed for one pass.
pub type Seqs<'a> = &'a [&'a [usize]];

impl DuplexModel {
    /// Build a model and its freshly initialized parameters.
    pub fn new<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(seed).stream(streams::INIT);
        let model = Self::build(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Register every parameter in `store` (which may be shape-only).
    pub fn build<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.stack.hidden;
        let c = cfg.stack.half();
        let k = cfg.upsample_kernel;
        let embed_x = store.add("embed_x", &[cfg.vocab_x, h], ParamKind::Weight, Init::Normal(1.0), rng);
        let embed_y = store.add("embed_y", &[cfg.vocab_y, h], ParamKind::Weight, Init::Normal(1.0), rng);
        let noise = 0.5 / ((k * h) as f64).sqrt();
        let up_x = Upsampler::new(store, rng, "up_x", h, k, noise);
        let up_y = Upsampler::new(store, rng, "up_y", h, k, noise);
        let stack = DuplexStack::new(store, rng, "stack", &cfg.stack)?;
        let head_x = Linear::new(store, rng, "head_x", h, cfg.vocab_x + 1, true);
        let head_y = Linear::new(store, rng, "head_y", h, cfg.vocab_y + 1, true);
        let ddm = DdmParams {
            time: Linear::new(store, rng, "ddm.time", h, h, true),
            mem_fwd: Linear::new(store, rng, "ddm.mem_fwd", h, c, true),
            mem_rev: Linear::new(store, rng, "ddm.mem_rev", h, c, true),
            eps_x: Linear::new(store, rng, "ddm.eps_x", h, h, true),
            eps_y: Linear::new(store, rng, "ddm.eps_y", h, h, true),
        };
        Ok(DuplexModel {
            cfg: cfg.clone(),
            embed_x,
            embed_y,
            up_x,
            up_y,
            stack,
            head_x,
            head_y,
            ddm,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cfg.stack.hidden
    }

    /// Blank id of a side's CTC head.
    pub fn blank(&self, side: Side) -> usize {
        self.cfg.vocab(side)
    }

    /// Whether an entry is a trainable weight outside frozen parts.
    pub fn is_trainable<S>(&self, e: &ParamEntry<S>) -> bool {
        !(self.cfg.freeze_encoders && (e.name == "embed_x" || e.name == "embed_y"))
    }

    fn embed(&self, side: Side) -> ParamId {
        match side {
            Side::X => self.embed_x,
            Side::Y => self.embed_y,
        }
    }

    fn upsampler(&self, side: Side) -> &Upsampler {
        match side {
            Side::X => &self.up_x,
            Side::Y => &self.up_y,
        }
    }

    pub fn head(&self, side: Side) -> &Linear {
        match side {
            Side::X => &self.head_x,
            Side::Y => &self.head_y,
        }
    }

    /// Stand-in encoder: gather embedding rows, `[len × h]`.
    pub fn encode<S: Scalar>(&self, b: &Bound<S>, side: Side, units: &[usize]) -> Result<Tensor<S>> {
        let v = self.cfg.vocab(side);
        if let Some(&bad) = units.iter().find(|&&u| u >= v) {
            return Err(Error::Data(format!("unit {bad} outside vocabulary of {v}")));
        }
        b.get(self.embed(side)).index_rows(units)
    }

    /// Embed, upsample and position-tag unit sequences at one end, giving
    /// the packed `[Σ 2·len × h]` canvas the stack consumes.
    pub fn canvas<S: Scalar>(&self, b: &Bound<S>, side: Side, seqs: Seqs<'_>) -> Result<(Tensor<S>, Rc<[usize]>)> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Data("cannot encode an empty sequence".into()));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let emb = self.encode(b, side, &ids)?;
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let up = self.upsampler(side);
        let canvas = per_segment(&emb, &lens, |_, seg| up.apply(b, seg))?;
        let segments: Rc<[usize]> = lens.iter().map(|n| 2 * n).collect();
        let canvas = if self.cfg.position_features {
            let feats = position_table(&segments, self.hidden());
            canvas.add(&Tensor::from_f64(canvas.shape(), &feats)?)?
        } else {
            canvas
        };
        Ok((canvas, segments))
    }

    /// Run one direction from unit sequences, keeping every stack state.
    pub fn translate<S: Scalar>(&self, b: &Bound<S>, ctx: &Ctx, dir: Direction, seqs: Seqs<'_>) -> Result<StackPass<S>> {
        let (canvas, segments) = self.canvas(b, Side::source_of(dir), seqs)?;
        let input = SplitState::split_packed(&canvas, segments)?;
        self.stack.run(b, ctx, input, dir, AttnSource::Own)
    }

    /// Per-frame log-probabilities of a side's units plus blank.
    pub fn log_probs<S: Scalar>(&self, b: &Bound<S>, side: Side, state: &SplitState<S>) -> Result<Tensor<S>> {
        self.head(side).apply(b, &state.merge()?)?.log_softmax_rows()
    }

    /// Learned embedding of a diffusion step, `[h]`.
    pub fn time_embedding<S: Scalar>(&self, b: &Bound<S>, t: usize) -> Result<Tensor<S>> {
        let h = self.hidden();
        let feats = Tensor::from_f64(&[1, h], &sinusoid(t as f64, h))?;
        self.ddm.time.apply(b, &feats)?.reshape(&[h])
    }

    /// Noise prediction for the side opposite `memory_side`.
    ///
    /// The reverse denoiser predicts X-side noise from `x_t` with the clean
    /// Y-side canvas as cross-attention memory; the forward denoiser is its
    /// mirror. `noisy` and `memory` are packed canvases with one segment
    /// per sequence in matching order.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise<S: Scalar>(
        &self,
        b: &Bound<S>,
        ctx: &Ctx,
        dir: Direction,
        noisy: &Tensor<S>,
        noisy_segments: Rc<[usize]>,
        t: usize,
        memory: &Tensor<S>,
        memory_segments: &[usize],
    ) -> Result<Tensor<S>> {
        let (proj, head) = match dir {
            Direction::Reverse => (&self.ddm.mem_rev, &self.ddm.eps_x),
            Direction::Forward => (&self.ddm.mem_fwd, &self.ddm.eps_y),
        };
        let mem = proj.apply(b, memory)?;
        let input = noisy.add(&self.time_embedding(b, t)?)?;
        let state = SplitState::split_packed(&input, noisy_segments)?;
        let src = AttnSource::Memory {
            kv: &mem,
            segments: memory_segments,
        };
        let out = self.stack.run(b, ctx, state, dir, src)?.into_output();
        head.apply(b, &out.merge()?)
    }
}

/// `[sin(p·w_0), cos(p·w_0), sin(p·w_1), ...]` with geometric frequencies.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let pairs = dim.div_ceil(2);
    let mut out = Vec::with_capacity(dim);
    for j in 0..pairs {
        let freq = 1.0 / 10_000f64.powf(j as f64 / pairs as f64);
        out.push((pos * freq).sin());
        if out.len() < dim {
            out.push((pos * freq).cos());
        }
    }
    out
}

/// Position features for packed sequences: the first half of the channels
/// encodes the offset from the sequence start, the second half the offset
/// from its end.
pub fn position_table(segments: &[usize], hidden: usize) -> Vec<f64> {
    let half = hidden / 2;
    let mut out = Vec::with_capacity(segments.iter().sum::<usize>() * hidden);
    for &len in segments {
        for i in 0..len {
            out.extend(sinusoid(i as f64, half));
            out.extend(sinusoid((len - 1 - i) as f64, hidden - half));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdc::testutil::small_cfg;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_x: 5,
            vocab_y: 6,
            stack: small_cfg(8, 2),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let (_, store) = DuplexModel::new::<f64>(&cfg(), 1).unwrap();
        assert_eq!(store.weight_count(), cfg().param_count());
        let big = ModelConfig {
            vocab_x: 100,
            vocab_y: 100,
            stack: RdcConfig::full_scale(),
            ..ModelConfig::default()
        };
        let mut shape_only = ParamStore::<f32>::shape_only();
        DuplexModel::build(&big, &mut shape_only, &mut RngStreams::new(0).stream("init")).unwrap();
        assert_eq!(shape_only.weight_count(), big.param_count());
    }

    #[test]
    fn canvas_doubles_lengths() {
        let (m, store) = DuplexModel::new::<f64>(&cfg(), 2).unwrap();
        let b = store.bind_frozen();
        let (canvas, seg) = m.canvas(&b, Side::X, &[&[1, 2, 3], &[4]]).unwrap();
        assert_eq!(canvas.shape(), &[8, 8]);
        assert_eq!(&*seg, &[6, 2]);
        assert_eq!(m.canvas(&b, Side::X, &[&[5]]).unwrap_err().kind(), "data");
        assert!(m.canvas(&b, Side::Y, &[&[5]]).is_ok());
    }

    #[test]
    fn translation_shapes_and_heads() {
        let (m, store) = DuplexModel::new::<f64>(&cfg(), 3).unwrap();
        let b = store.bind_frozen();
        let pass = m.translate(&b, &Ctx::eval(), Direction::Forward, &[&[1, 2], &[0, 0, 4]]).unwrap();
        assert_eq!(pass.states.len(), 3);
        let lp = m.log_probs(&b, Side::Y, pass.output()).unwrap();
        assert_eq!(lp.shape(), &[10, 7]);
        let row: f64 = lp.data()[..7].iter().map(|v| v.exp()).sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    #[test]
    fn denoiser_preserves_noisy_shape() {
        let (m, store) = DuplexModel::new::<f64>(&cfg(), 4).unwrap();
        let b = store.bind_frozen();
        let ctx = Ctx::eval();
        for (tq, tm) in [(6, 9), (9, 6), (1, 1)] {
            let noisy = Tensor::<f64>::ones(&[tq, 8]);
            let mem = Tensor::<f64>::ones(&[tm, 8]);
            let out = m.denoise(&b, &ctx, Direction::Reverse, &noisy, vec![tq].into(), 3, &mem, &[tm]).unwrap();
            assert_eq!(out.shape(), &[tq, 8]);
        }
    }

    #[test]
    fn position_features_distinguish_ends() {
        let t = position_table(&[3], 4);
        // Row 0 start offset 0, end offset 2; row 2 the mirror image.
        assert_eq!(&t[0..2], &t[10..12]);
        assert_eq!(&t[2..4], &t[8..10]);
        assert_ne!(&t[0..2], &t[8..10]);
    }

    #[test]
    fn encoder_rows_and_gradient() {
        let (m, store) = DuplexModel::new::<f64>(&cfg(), 5).unwrap();
        let b = store.bind_frozen();
        let table = b.get(m.embed_x).to_vec();
        let one = m.encode(&b, Side::X, &[2]).unwrap();
        assert_eq!(one.shape(), &[1, 8]);
        assert_eq!(one.data(), &table[16..24]);
        let same = m.encode(&b, Side::X, &[3, 3]).unwrap();
        assert_eq!(&same.data()[..8], &same.data()[8..]);
        assert_eq!(m.encode(&b, Side::X, &[7]).unwrap_err().kind(), "data");

        let mut rng = RngStreams::new(9).stream("gc");
        let w = crate::gradcheck::rand_tensor(&[5, 8], &mut rng);
        let probe = crate::gradcheck::rand_tensor(&[3, 8], &mut rng);
        let err = crate::gradcheck::check_gradients(&[w], |ins| {
            let b = store.bind_frozen().with_overrides(&[m.embed_x], &ins[..1]);
            Ok(m.encode(&b, Side::X, &[4, 0, 4])?.mul(&probe)?.sum())
        });
        assert!(err <= 1e-6, "{err}");
    }
}

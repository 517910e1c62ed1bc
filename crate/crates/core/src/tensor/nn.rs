//! Neural-network primitives with fused adjoints.

use std::rc::Rc;

use rand::Rng;

use super::ops::sigmoid;
use super::{gemm, Scalar, Tensor};
use crate::error::{config_err, shape_err, Error, Result};

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one row is present).
    pub var: Vec<f64>,
}

/// Where batch norm takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

fn last_dim<S: Scalar>(x: &Tensor<S>, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&h) if h > 0 => Ok(h),
        _ => Err(Error::EmptyAxis { op }),
    }
}

impl<S: Scalar> Tensor<S> {
    /// Normalize each row over the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let h = last_dim(self, "layer_norm")?;
        if gain.shape() != [h] || bias.shape() != [h] {
            return Err(shape_err("layer_norm", self.shape(), gain.shape()));
        }
        let eps = S::of(eps);
        let rows = self.numel() / h;
        let hn = S::of(h as f64);
        let mut xhat = vec![S::zero(); self.numel()];
        let mut inv_std = vec![S::zero(); rows];
        for (r, row) in self.data().chunks(h).enumerate() {
            let mu = row.iter().copied().sum::<S>() / hn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / hn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * h..(r + 1) * h].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let (g, b) = (gain.data(), bias.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % h] + b[i % h])
            .collect();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |gout, _, p| {
                let g = p[1].data();
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![S::zero(); gout.len()];
                    for r in 0..rows {
                        let span = r * h..(r + 1) * h;
                        let dxh: Vec<S> = gout[span.clone()]
                            .iter()
                            .enumerate()
                            .map(|(j, &v)| v * g[j])
                            .collect();
                        let xh = &xhat[span.clone()];
                        let m1 = dxh.iter().copied().sum::<S>() / hn;
                        let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() / hn;
                        for (j, o) in gx[span].iter_mut().enumerate() {
                            *o = inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    gx
                });
                let gg = p[1].requires_grad().then(|| {
                    let full: Vec<S> = gout.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                    sum_rows(&full, h)
                });
                let gb = p[2].requires_grad().then(|| sum_rows(gout, h));
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Row-wise softmax over the last axis of a matrix. Columns with
    /// `mask[j] == false` get zero weight; a row with no valid column is all
    /// zeros.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor<S>> {
        let (r, c) = self.dims2("softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != c {
                return Err(shape_err("softmax_rows", self.shape(), &[m.len()]));
            }
        }
        let valid = |j: usize| mask.map_or(true, |m| m[j]);
        let mut out = vec![S::zero(); r * c];
        for (row, dst) in self.data().chunks(c).zip(out.chunks_mut(c)) {
            let mx = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                continue;
            }
            let mut z = S::zero();
            for j in (0..c).filter(|&j| valid(j)) {
                let e = (row[j] - mx).exp();
                dst[j] = e;
                z += e;
            }
            dst.iter_mut().for_each(|v| *v = *v / z);
        }
        Ok(Tensor::from_op(
            "softmax_rows",
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![S::zero(); r * c];
                for i in 0..r {
                    let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Result<Tensor<S>> {
        let c = last_dim(self, "log_softmax_rows")?;
        let mut out = vec![S::zero(); self.numel()];
        for (row, dst) in self.data().chunks(c).zip(out.chunks_mut(c)) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        Ok(Tensor::from_op(
            "log_softmax_rows",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![S::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: S = gr.iter().copied().sum();
                    for j in 0..c {
                        dst[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gated linear unit over the last axis: `a ⊙ σ(b)` where `[a; b]` are
    /// the two halves.
    pub fn glu(&self) -> Result<Tensor<S>> {
        let w = last_dim(self, "glu")?;
        if w % 2 != 0 {
            return Err(Error::Rank {
                op: "glu",
                expected: "an even last extent",
                got: self.shape().to_vec(),
            });
        }
        let c = w / 2;
        let rows = self.numel() / w;
        let mut out = Vec::with_capacity(rows * c);
        for row in self.data().chunks(w) {
            out.extend((0..c).map(|j| row[j] * sigmoid(row[c + j])));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        Ok(Tensor::from_op(
            "glu",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let x = p[0].data();
                let mut gx = vec![S::zero(); x.len()];
                for ((row, gr), dst) in x.chunks(w).zip(g.chunks(c)).zip(gx.chunks_mut(w)) {
                    for j in 0..c {
                        let s = sigmoid(row[c + j]);
                        dst[j] = gr[j] * s;
                        dst[c + j] = gr[j] * row[j] * s * (S::one() - s);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Depthwise convolution over time with same-length zero padding.
    /// `self: [t×c]`, `kernel: [c×k]` with odd `k`.
    pub fn conv1d_depthwise(&self, kernel: &Tensor<S>) -> Result<Tensor<S>> {
        let t = self.dims2("conv1d_depthwise")?.0;
        self.conv1d_depthwise_packed(kernel, &[t])
    }

    /// Depthwise convolution over packed sequences: rows are split into
    /// consecutive segments of the given lengths and each is padded
    /// independently, so no context leaks across segment boundaries.
    pub fn conv1d_depthwise_packed(&self, kernel: &Tensor<S>, segments: &[usize]) -> Result<Tensor<S>> {
        let (t, c) = self.dims2("conv1d_depthwise")?;
        let (kc, k) = kernel.dims2("conv1d_depthwise")?;
        if kc != c {
            return Err(shape_err("conv1d_depthwise", self.shape(), kernel.shape()));
        }
        if k % 2 == 0 {
            return Err(config_err(format!("depthwise kernel width {k} must be odd")));
        }
        if segments.iter().sum::<usize>() != t {
            return Err(shape_err("conv1d_depthwise", self.shape(), segments));
        }
        let pad = k / 2;
        // (output row, source row, tap) triples, precomputed once.
        let mut taps = Vec::new();
        let mut base = 0;
        for &len in segments {
            for tau in 0..len {
                for j in 0..k {
                    if let Some(src) = (tau + j).checked_sub(pad).filter(|&s| s < len) {
                        taps.push((base + tau, base + src, j));
                    }
                }
            }
            base += len;
        }
        let (x, w) = (self.data(), kernel.data());
        let mut out = vec![S::zero(); t * c];
        for &(o, src, j) in &taps {
            for ch in 0..c {
                out[o * c + ch] += w[ch * k + j] * x[src * c + ch];
            }
        }
        Ok(Tensor::from_op(
            "conv1d_depthwise",
            vec![t, c],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, _, p| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = p[0].requires_grad().then(|| vec![S::zero(); t * c]);
                let mut gw = p[1].requires_grad().then(|| vec![S::zero(); c * k]);
                for &(o, src, j) in &taps {
                    for ch in 0..c {
                        let gv = g[o * c + ch];
                        if let Some(gx) = gx.as_mut() {
                            gx[src * c + ch] += gv * w[ch * k + j];
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[ch * k + j] += gv * x[src * c + ch];
                        }
                    }
                }
                vec![gx, gw]
            }),
        ))
    }

    /// Per-timestep linear map `[t×c]·[c×c']`.
    pub fn conv1d_pointwise(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul(w)
    }

    /// Stride-2 transposed convolution over time: `[t×cin] -> [2t×cout]`.
    ///
    /// `w: [k×cin×cout]` with even `k`; input frame `i` contributes `x_i·w_j`
    /// to output frame `2i + j - (k/2 - 1)`.
    pub fn conv_transpose_up2(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        let (t, cin) = self.dims2("conv_transpose_up2")?;
        let (k, wcin, cout) = match w.shape() {
            [k, a, b] => (*k, *a, *b),
            s => {
                return Err(Error::Rank {
                    op: "conv_transpose_up2",
                    expected: "a [k×cin×cout] kernel",
                    got: s.to_vec(),
                })
            }
        };
        if wcin != cin {
            return Err(shape_err("conv_transpose_up2", self.shape(), w.shape()));
        }
        if k % 2 != 0 {
            return Err(config_err(format!("upsampling kernel width {k} must be even")));
        }
        let pad = k / 2 - 1;
        let t2 = 2 * t;
        let target = move |i: usize, j: usize| (2 * i + j).checked_sub(pad).filter(|&o| o < t2);
        let mut out = vec![S::zero(); t2 * cout];
        let mut proj = vec![S::zero(); t * cout];
        for j in 0..k {
            let wj = &w.data()[j * cin * cout..(j + 1) * cin * cout];
            gemm(t, cin, cout, self.data(), false, wj, false, &mut proj, S::zero());
            for i in 0..t {
                if let Some(o) = target(i, j) {
                    out[o * cout..(o + 1) * cout]
                        .iter_mut()
                        .zip(&proj[i * cout..(i + 1) * cout])
                        .for_each(|(a, b)| *a += *b);
                }
            }
        }
        Ok(Tensor::from_op(
            "conv_transpose_up2",
            vec![t2, cout],
            out,
            vec![self.clone(), w.clone()],
            Box::new(move |g, _, p| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = p[0].requires_grad().then(|| vec![S::zero(); t * cin]);
                let mut gw = p[1].requires_grad().then(|| vec![S::zero(); k * cin * cout]);
                let mut gp = vec![S::zero(); t * cout];
                for j in 0..k {
                    gp.iter_mut().for_each(|v| *v = S::zero());
                    for i in 0..t {
                        if let Some(o) = target(i, j) {
                            gp[i * cout..(i + 1) * cout].copy_from_slice(&g[o * cout..(o + 1) * cout]);
                        }
                    }
                    let span = j * cin * cout..(j + 1) * cin * cout;
                    if let Some(gx) = gx.as_mut() {
                        gemm(t, cout, cin, &gp, false, &w[span.clone()], true, gx, S::one());
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(cin, t, cout, x, true, &gp, false, &mut gw[span], S::zero());
                    }
                }
                vec![gx, gw]
            }),
        ))
    }

    /// Batch normalization of a `[t×c]` matrix over its rows.
    ///
    /// In [`NormMode::Batch`] the statistics of `self` are used and returned
    /// so the caller can fold them into running averages.
    pub fn batch_norm(
        &self,
        gain: &Tensor<S>,
        bias: &Tensor<S>,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Tensor<S>, Option<BatchNormStats>)> {
        let (t, c) = self.dims2("batch_norm")?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(shape_err("batch_norm", self.shape(), gain.shape()));
        }
        let x = self.data();
        let tn = S::of(t as f64);
        let (mean, var, stats): (Vec<S>, Vec<S>, Option<BatchNormStats>) = match mode {
            NormMode::Batch => {
                let mut mean = vec![S::zero(); c];
                for row in x.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m = *m / tn);
                let mut var = vec![S::zero(); c];
                for row in x.chunks(c) {
                    for ch in 0..c {
                        let d = row[ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                let biased: Vec<S> = var.iter().map(|&v| v / tn).collect();
                let correction = if t > 1 { t as f64 / (t as f64 - 1.0) } else { 1.0 };
                let stats = BatchNormStats {
                    mean: mean.iter().map(|v| v.f64()).collect(),
                    var: biased.iter().map(|v| v.f64() * correction).collect(),
                };
                (mean, biased, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", self.shape(), &[mean.len()]));
                }
                (
                    mean.iter().map(|&v| S::of(v)).collect(),
                    var.iter().map(|&v| S::of(v)).collect(),
                    None,
                )
            }
        };
        let batch_stats = stats.is_some();
        let eps = S::of(eps);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); t * c];
        for (i, (&v, o)) in x.iter().zip(xhat.iter_mut()).enumerate() {
            let ch = i % c;
            *o = (v - mean[ch]) * inv_std[ch];
        }
        let (g, b) = (gain.data(), bias.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        let y = Tensor::from_op(
            "batch_norm",
            vec![t, c],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |gout, _, p| {
                let g = p[1].data();
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![S::zero(); t * c];
                    for ch in 0..c {
                        let (mut m1, mut m2) = (S::zero(), S::zero());
                        for r in 0..t {
                            let d = gout[r * c + ch] * g[ch];
                            m1 += d;
                            m2 += d * xhat[r * c + ch];
                        }
                        m1 = m1 / tn;
                        m2 = m2 / tn;
                        for r in 0..t {
                            let d = gout[r * c + ch] * g[ch];
                            gx[r * c + ch] = if batch_stats {
                                inv_std[ch] * (d - m1 - xhat[r * c + ch] * m2)
                            } else {
                                inv_std[ch] * d
                            };
                        }
                    }
                    gx
                });
                let gg = p[1].requires_grad().then(|| {
                    let full: Vec<S> = gout.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                    sum_rows(&full, c)
                });
                let gb = p[2].requires_grad().then(|| sum_rows(gout, c));
                vec![gx, gg, gb]
            }),
        );
        Ok((y, stats))
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `self`
    /// unchanged.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(&a, &b)| a * b).collect();
        let mask = Rc::new(mask);
        Ok(Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().zip(mask.iter()).map(|(&a, &b)| a * b).collect())]),
        ))
    }

    /// Cosine similarity of the flattened tensors. A zero-norm operand gives 0.
    pub fn cosine_similarity(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != other.shape() {
            return Err(shape_err("cosine_similarity", self.shape(), other.shape()));
        }
        let (a, b) = (self.data(), other.data());
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
        let na = a.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        let degenerate = na == 0.0 || nb == 0.0;
        let cos = if degenerate { 0.0 } else { dot / (na * nb) };
        Ok(Tensor::from_op(
            "cosine_similarity",
            Vec::new(),
            vec![S::of(cos)],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let g = g[0].f64();
                let (a, b) = (p[0].data(), p[1].data());
                let grad = |x: &[S], y: &[S], nx: f64, ny: f64| -> Vec<S> {
                    if degenerate {
                        return vec![S::zero(); x.len()];
                    }
                    x.iter()
                        .zip(y)
                        .map(|(&xi, &yi)| S::of(g * (yi.f64() / (nx * ny) - cos * xi.f64() / (nx * nx))))
                        .collect()
                };
                vec![
                    p[0].requires_grad().then(|| grad(a, b, na, nb)),
                    p[1].requires_grad().then(|| grad(b, a, nb, na)),
                ]
            }),
        ))
    }
}

fn sum_rows<S: Scalar>(x: &[S], w: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w];
    for row in x.chunks(w) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}

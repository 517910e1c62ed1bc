use std::rc::Rc;

use super::{gemm, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// `b` either matches `a` exactly or equals a trailing suffix of `a`'s shape,
/// in which case it repeats over the leading axes.
fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(true);
    }
    Err(shape_err(op, a, b))
}

/// Sum a gradient laid out like `a` down to the repeated suffix of size `inner`.
fn reduce_leading<S: Scalar>(g: &[S], inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); inner];
    for chunk in g.chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
    }
    out
}

impl<S: Scalar> Tensor<S> {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Tensor<S> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, p| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_linear("add", other, S::one())
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_linear("sub", other, -S::one())
    }

    /// `self + sign * other` with suffix broadcasting of `other`.
    fn binary_linear(&self, op: &'static str, other: &Tensor<S>, sign: S) -> Result<Tensor<S>> {
        let bcast = suffix_broadcast(op, self.shape(), other.shape())?;
        let b = other.data();
        let inner = b.len();
        let data: Vec<S> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + sign * b[i % inner])
            .collect();
        Ok(Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| g.to_vec());
                let gb = p[1].requires_grad().then(|| {
                    let mut r = if bcast { reduce_leading(g, inner) } else { g.to_vec() };
                    if sign != S::one() {
                        r.iter_mut().for_each(|v| *v = *v * sign);
                    }
                    r
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise product with suffix broadcasting of `other`.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let bcast = suffix_broadcast("mul", self.shape(), other.shape())?;
        let b = other.data();
        let inner = b.len();
        let data: Vec<S> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b[i % inner])
            .collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &g)| g * b[i % inner])
                        .collect()
                });
                let gb = p[1].requires_grad().then(|| {
                    let full: Vec<S> = g.iter().zip(a).map(|(&g, &a)| g * a).collect();
                    if bcast {
                        reduce_leading(&full, inner)
                    } else {
                        full
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<S> {
        let c = S::of(c);
        self.unary("scale", |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.unary("neg", |x| -x, |_, _| -S::one())
    }

    pub fn square(&self) -> Tensor<S> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary("sigmoid", sigmoid, |_, y| y * (S::one() - y))
    }

    /// `x · sigmoid(x)`, also known as Swish.
    pub fn silu(&self) -> Tensor<S> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    pub fn sum(&self) -> Tensor<S> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel();
        let inv = S::one() / S::of(n as f64);
        let total: S = self.data().iter().copied().sum();
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Rank {
                op,
                expected: "a matrix",
                got: s.to_vec(),
            }),
        }
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, S::zero());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    gemm(m, n, k, g, false, p[1].data(), true, &mut ga, S::zero());
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![S::zero(); k * n];
                    gemm(k, m, n, p[0].data(), true, g, false, &mut gb, S::zero());
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `self · w + b` for `self: [t×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (r, c) = self.dims2("transpose")?;
        let out = transpose_raw(self.data(), r, c);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (r, c) = self.dims2("narrow_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err("narrow_cols", self.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(Tensor::from_op(
            "narrow_cols",
            vec![r, len],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); r * c];
                for (dst, src) in gx.chunks_mut(c).zip(g.chunks(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| Error::Rank {
            op: "concat_cols",
            expected: "at least one part",
            got: Vec::new(),
        })?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_op(
            "concat_cols",
            vec![r, total],
            out,
            parts.to_vec(),
            Box::new(move |g, _, p| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(p)
                    .map(|(&w, part)| {
                        let res = part.requires_grad().then(|| {
                            let mut gp = Vec::with_capacity(r * w);
                            for row in g.chunks(total) {
                                gp.extend_from_slice(&row[offset..offset + w]);
                            }
                            gp
                        });
                        offset += w;
                        res
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (r, c) = self.dims2("narrow_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err("narrow_rows", self.shape(), &[start, len]));
        }
        let out = self.data()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(
            "narrow_rows",
            vec![len, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    /// Stack matrices with equal column counts along rows.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| Error::Rank {
            op: "concat_rows",
            expected: "at least one part",
            got: Vec::new(),
        })?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let (_, c) = first.dims2("concat_rows")?;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", first.shape(), p.shape()));
            }
            sizes.push(pr * c);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            "concat_rows",
            vec![total / c, c],
            out,
            parts.to_vec(),
            Box::new(move |g, _, p| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(p)
                    .map(|(&n, part)| {
                        let res = part.requires_grad().then(|| g[offset..offset + n].to_vec());
                        offset += n;
                        res
                    })
                    .collect()
            }),
        ))
    }

    /// Row lookup: `out[i] = self[ids[i]]` for a `[n×d]` table.
    pub fn index_rows(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let (n, d) = self.dims2("index_rows")?;
        if ids.is_empty() {
            return Err(Error::Rank {
                op: "index_rows",
                expected: "at least one index",
                got: Vec::new(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("row index {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "index_rows",
            vec![ids.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gt = vec![S::zero(); n * d];
                for (row, &i) in g.chunks(d).zip(&ids) {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += *b);
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Flat gather: `out[i] = self.data[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", shape, &[index.len()]));
        }
        let n = self.numel();
        if index.iter().any(|&i| i >= n) {
            return Err(Error::Data(format!("gather index out of range for {n} elements")));
        }
        let src = self.data();
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(
            "gather",
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![S::zero(); n];
                for (&i, &gv) in index.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn transpose_raw<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rand_tensor};
    use crate::rng::RngStreams;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngStreams::new(1).stream("test");
        let b = rand_tensor(&[3, 4], &mut rng);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(eye.matmul(&b).unwrap().data(), b.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = RngStreams::new(2).stream("test");
        let a = rand_tensor(&[4, 5], &mut rng);
        let b = rand_tensor(&[5, 2], &mut rng);
        let w = rand_tensor(&[4, 2], &mut rng);
        let err = check_gradients(&[a, b], |x| x[0].matmul(&x[1])?.mul(&w)?.sum().into_ok());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = RngStreams::new(3).stream("test");
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 5], &mut rng);
        let c = rand_tensor(&[5, 2], &mut rng);
        let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(crate::tensor::max_abs_diff(&l, &r) < 1e-10);
    }

    #[test]
    fn broadcast_bias_over_rows() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2], &[10., 20.]);
        assert_eq!(x.add(&b).unwrap().data(), &[11., 22., 13., 24.]);
        assert!(b.add(&x).is_err());
        assert!(x.add(&t(&[3], &[0., 0., 0.])).is_err());
    }

    #[test]
    fn elementwise_gradcheck() {
        let mut rng = RngStreams::new(4).stream("test");
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let c = rand_tensor(&[3, 4], &mut rng);
        let err = check_gradients(&[a, b, c], |x| {
            let y = x[0].add(&x[1])?.mul(&x[2])?.sub(&x[1])?.silu().square();
            let z = y.mul(&x[1])?.sigmoid().exp().neg().scale(0.5);
            Ok(z.mean())
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn silu_values() {
        let x = t(&[3], &[0., 20., -20.]);
        let y = x.silu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn structural_gradcheck() {
        let mut rng = RngStreams::new(5).stream("test");
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 2], &mut rng);
        let w = rand_tensor(&[8, 3], &mut rng);
        let idx: Rc<[usize]> = Rc::from(vec![0usize, 5, 5, 11, 2, 7]);
        let err = check_gradients(&[a, b], |x| {
            let c = Tensor::concat_cols(&[x[0].narrow_cols(1, 2)?, x[1].clone(), x[0].clone()])?;
            let d = c.transpose()?.mul(&w)?.index_rows(&[0, 0, 3])?;
            let e = x[0].gather(idx.clone(), &[2, 3])?.reshape(&[6])?;
            Ok(d.sum().add(&e.square().sum())?)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn row_slicing_gradcheck() {
        let mut rng = RngStreams::new(6).stream("test");
        let a = rand_tensor(&[5, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        let err = check_gradients(&[a, b], |x| {
            let c = Tensor::concat_rows(&[x[1].clone(), x[0].narrow_rows(1, 3)?, x[1].clone()])?;
            Ok(c.square().sum())
        });
        assert!(err < 1e-6, "{err}");
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = Tensor::concat_rows(&[a.narrow_rows(1, 1).unwrap(), a.clone()]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.to_f64_vec(), vec![3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn index_rows_out_of_range_is_data_error() {
        let table = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(table.index_rows(&[3]), Err(Error::Data(_))));
    }

    trait IntoOk: Sized {
        fn into_ok(self) -> Result<Self> {
            Ok(self)
        }
    }
    impl IntoOk for Tensor<f64> {}
}

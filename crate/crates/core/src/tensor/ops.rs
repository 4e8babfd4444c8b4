use std::rc::Rc;

use super::{numel, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// How [`Var::normalize_axis`] inverts the norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    /// `x / (rms(x) + eps)`
    Rms { eps: f64 },
    /// `x / max(||x||_2, eps)`
    L2 { eps: f64 },
}

/// `(outer, n, inner)` view of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn binary_same(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, op, f)?;
        Ok(self
            .tape
            .record(y, &[self, other], move |g, need| back(g, &a, &b, need)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "add", |a, b| a + b, |g, _, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "sub", |a, b| a - b, |g, _, _, need| {
            vec![Some(g.clone()), need[1].then(|| g.scale(-1.0))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "mul", |a, b| a * b, |g, a, b, need| {
            vec![
                need[0].then(|| g.mul(b).unwrap()),
                need[1].then(|| g.mul(a).unwrap()),
            ]
        })
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "div", |a, b| a / b, |g, a, b, need| {
            vec![
                need[0].then(|| g.zip_map(b, "div", |g, b| g / b).unwrap()),
                need[1].then(|| {
                    let ga = g.mul(a).unwrap();
                    ga.zip_map(b, "div", |v, b| -v / (b * b)).unwrap()
                }),
            ]
        })
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn sqr(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`
    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamp into `[lo, hi]`. Gradient is passed through inside the closed
    /// interval and zeroed outside it.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Multiply by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (x, sv) = (self.value(), s.value());
        if sv.len() != 1 {
            return Err(Error::shape("mul_scalar", x.shape(), sv.shape()));
        }
        let c = sv.item();
        let y = x.scale(c);
        let sshape = sv.shape().to_vec();
        Ok(self.tape.record(y, &[self, s], move |g, need| {
            vec![
                need[0].then(|| g.scale(c)),
                need[1].then(|| Tensor::from_parts(sshape.clone(), vec![g.dot(&x)])),
            ]
        }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.tape.record(y, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = numel(&self.shape()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for k in 0..inner {
                    out[o * inner + k] += xd[base + k];
                }
            }
        }
        let mut yshape = x.shape().to_vec();
        yshape[axis] = 1;
        let xshape = x.shape().to_vec();
        Ok(self.tape.record(
            Tensor::from_parts(yshape, out),
            &[self],
            move |g, _| vec![Some(expand(g, &xshape, outer, n, inner))],
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Repeat an extent-1 `axis` to extent `n`.
    pub fn expand_axis(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("expand_axis", x.shape(), axis)?;
        if x.shape()[axis] != 1 {
            let mut want = x.shape().to_vec();
            want[axis] = 1;
            return Err(Error::shape("expand_axis", x.shape(), &want));
        }
        let (outer, _, inner) = split_axis(x.shape(), axis);
        let mut yshape = x.shape().to_vec();
        yshape[axis] = n;
        let y = expand(&x, &yshape, outer, n, inner);
        Ok(self.tape.record(y, &[self], move |g, _| {
            let gd = g.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    let base = (o * n + i) * inner;
                    for k in 0..inner {
                        out[o * inner + k] += gd[base + k];
                    }
                }
            }
            let mut s = g.shape().to_vec();
            s[axis] = 1;
            vec![Some(Tensor::from_parts(s, out))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let xshape = x.shape().to_vec();
        Ok(self.tape.record(y, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(xshape.clone(), g.data().to_vec()))]
        }))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let y = Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n, false, false));
        Ok(self.tape.record(y, &[self, other], move |g, need| {
            vec![
                // dA = G B^T
                need[0].then(|| Tensor::from_parts(vec![m, k], gemm(g.data(), b.data(), m, n, k, false, true))),
                // dB = A^T G
                need[1].then(|| Tensor::from_parts(vec![k, n], gemm(a.data(), g.data(), k, m, n, true, false))),
            ]
        }))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r != 2 && r != 3 {
            return Err(Error::Contract(format!(
                "transpose expects rank 2 or 3, got {:?}",
                x.shape()
            )));
        }
        let (b, m, n) = if r == 2 {
            (1, x.shape()[0], x.shape()[1])
        } else {
            (x.shape()[0], x.shape()[1], x.shape()[2])
        };
        let mut yshape = x.shape().to_vec();
        yshape.swap(r - 2, r - 1);
        let y = Tensor::from_parts(yshape, transpose_batched(x.data(), b, m, n));
        let xshape = x.shape().to_vec();
        Ok(self.tape.record(y, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(
                xshape.clone(),
                transpose_batched(g.data(), b, n, m),
            ))]
        }))
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(Error::shape("bmm", a.shape(), b.shape()));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let y = Tensor::from_parts(vec![bs, m, n], bgemm(a.data(), b.data(), bs, m, k, n, false, false));
        Ok(self.tape.record(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| {
                    Tensor::from_parts(vec![bs, m, k], bgemm(g.data(), b.data(), bs, m, n, k, false, true))
                }),
                need[1].then(|| {
                    Tensor::from_parts(vec![bs, k, n], bgemm(a.data(), g.data(), bs, k, m, n, true, false))
                }),
            ]
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape().to_vec();
        check_axis("concat", &s0, axis)?;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &s0, s));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut yshape = s0.clone();
        yshape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.record(Tensor::from_parts(yshape, out), parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut res = Vec::with_capacity(extents.len());
            for ((&e, shape), &nd) in extents.iter().zip(&shapes).zip(need) {
                if nd {
                    let mut part = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    res.push(Some(Tensor::from_parts(shape.clone(), part)));
                } else {
                    res.push(None);
                }
                offset += e;
            }
            res
        }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if start > end || end > n {
            return Err(Error::Contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                x.shape()
            )));
        }
        let e = end - start;
        let mut out = Vec::with_capacity(outer * e * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + e * inner]);
        }
        let mut yshape = x.shape().to_vec();
        yshape[axis] = e;
        let xshape = x.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(yshape, out), &[self], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + e * inner].copy_from_slice(&g.data()[o * e * inner..(o + 1) * e * inner]);
            }
            vec![Some(Tensor::from_parts(xshape.clone(), gx))]
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + k;
                let m = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..n {
                    let e = (xd[idx(i)] - m).exp();
                    y[idx(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    y[idx(i)] /= s;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = y.clone();
        Ok(self.tape.record(y, &[self], move |g, _| {
            let (gd, yd) = (g.data(), yc.data());
            let mut gx = vec![0.0; gd.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + k;
                    let dot: f64 = (0..n).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
                    for i in 0..n {
                        gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }

    /// Normalize every fiber along `axis` (all other indices fixed).
    pub fn normalize_axis(self, axis: usize, kind: NormKind) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("normalize_axis", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        // per-fiber norm (raw L2)
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let ss: f64 = (0..n).map(|i| xd[(o * n + i) * inner + k].powi(2)).sum();
                let nrm = ss.sqrt();
                norms[o * inner + k] = nrm;
                let d = denom(kind, nrm, n);
                for i in 0..n {
                    let j = (o * n + i) * inner + k;
                    y[j] = xd[j] / d;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = y.clone();
        Ok(self.tape.record(y, &[self], move |g, _| {
            let (gd, xd, yd) = (g.data(), x.data(), yc.data());
            let mut gx = vec![0.0; gd.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let nrm = norms[o * inner + k];
                    let d = denom(kind, nrm, n);
                    let idx = |i: usize| (o * n + i) * inner + k;
                    match kind {
                        NormKind::Rms { eps } => {
                            let r = nrm / (n as f64).sqrt();
                            let xg: f64 = (0..n).map(|i| xd[idx(i)] * gd[idx(i)]).sum();
                            let c = if r > 0.0 { xg / ((r + eps).powi(2) * r * n as f64) } else { 0.0 };
                            for i in 0..n {
                                gx[idx(i)] = gd[idx(i)] / d - xd[idx(i)] * c;
                            }
                        }
                        NormKind::L2 { eps } => {
                            if nrm >= eps {
                                let yg: f64 = (0..n).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
                                for i in 0..n {
                                    gx[idx(i)] = gd[idx(i)] - yd[idx(i)] * yg;
                                }
                                // second pass removes the radial residue left by rounding
                                let yr: f64 = (0..n).map(|i| yd[idx(i)] * gx[idx(i)]).sum();
                                for i in 0..n {
                                    gx[idx(i)] = (gx[idx(i)] - yd[idx(i)] * yr) / nrm;
                                }
                            } else {
                                for i in 0..n {
                                    gx[idx(i)] = gd[idx(i)] / eps;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }

    /// Per-channel multiply. `self` is `[N, C, ...]`; `s` is `[C]` or `[N, C]`.
    pub fn scale_channels(self, s: Var<'t>) -> Result<Var<'t>> {
        self.channel_op(s, "scale_channels", true)
    }

    /// Per-channel add. `self` is `[N, C, ...]`; `b` is `[C]` or `[N, C]`.
    pub fn shift_channels(self, b: Var<'t>) -> Result<Var<'t>> {
        self.channel_op(b, "shift_channels", false)
    }

    fn channel_op(self, s: Var<'t>, op: &'static str, multiply: bool) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (x, sv) = (self.value(), s.value());
        if x.rank() < 2 {
            return Err(Error::shape(op, x.shape(), sv.shape()));
        }
        let (nb, c) = (x.shape()[0], x.shape()[1]);
        let per_sample = match sv.shape() {
            [cc] if *cc == c => false,
            [nn, cc] if *nn == nb && *cc == c => true,
            _ => return Err(Error::shape(op, x.shape(), sv.shape())),
        };
        let sp = numel(&x.shape()[2..]);
        let sidx = move |n: usize, ch: usize| if per_sample { n * c + ch } else { ch };
        let mut y = x.data().to_vec();
        for n in 0..nb {
            for ch in 0..c {
                let v = sv.data()[sidx(n, ch)];
                let row = &mut y[(n * c + ch) * sp..(n * c + ch + 1) * sp];
                if multiply {
                    row.iter_mut().for_each(|e| *e *= v);
                } else {
                    row.iter_mut().for_each(|e| *e += v);
                }
            }
        }
        let sshape = sv.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(x.shape().to_vec(), y), &[self, s], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                if multiply {
                    let mut gx = gd.to_vec();
                    for n in 0..nb {
                        for ch in 0..c {
                            let v = sv.data()[sidx(n, ch)];
                            gx[(n * c + ch) * sp..(n * c + ch + 1) * sp]
                                .iter_mut()
                                .for_each(|e| *e *= v);
                        }
                    }
                    Tensor::from_parts(g.shape().to_vec(), gx)
                } else {
                    g.clone()
                }
            });
            let gs = need[1].then(|| {
                let mut gs = vec![0.0; numel(&sshape)];
                for n in 0..nb {
                    for ch in 0..c {
                        let range = (n * c + ch) * sp..(n * c + ch + 1) * sp;
                        let acc: f64 = if multiply {
                            gd[range.clone()].iter().zip(&x.data()[range]).map(|(a, b)| a * b).sum()
                        } else {
                            gd[range].iter().sum()
                        };
                        gs[sidx(n, ch)] += acc;
                    }
                }
                Tensor::from_parts(sshape.clone(), gs)
            });
            vec![gx, gs]
        }))
    }
}

fn denom(kind: NormKind, nrm: f64, n: usize) -> f64 {
    match kind {
        NormKind::Rms { eps } => nrm / (n as f64).sqrt() + eps,
        NormKind::L2 { eps } => nrm.max(eps),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn expand(x: &Tensor, yshape: &[usize], outer: usize, n: usize, inner: usize) -> Tensor {
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(yshape.to_vec(), out)
}

fn transpose_batched(x: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let (src, dst) = (&x[bi * m * n..], &mut out[bi * m * n..(bi + 1) * m * n]);
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Row-major GEMM producing `[m, n]`, optionally reading `a` as the transpose
/// of a stored `[k, m]` and `b` as the transpose of a stored `[n, k]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    // keep the inner loop contiguous
    let bt;
    let b = if tb {
        bt = transpose_batched(b, 1, n, k);
        &bt[..]
    } else {
        b
    };
    let mut out = vec![0.0; m * n];
    let row = |i: usize, orow: &mut [f64]| {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 {
        par::for_each_chunk(&mut out, n, row);
    } else {
        out.chunks_mut(n.max(1)).enumerate().for_each(|(i, r)| row(i, r));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn bgemm(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; bs * m * n];
    par::for_each_chunk(&mut out, m * n, |bi, o| {
        let r = gemm(&a[bi * m * k..(bi + 1) * m * k], &b[bi * k * n..(bi + 1) * k * n], m, k, n, ta, tb);
        o.copy_from_slice(&r);
    });
    out
}

//! 2-D convolution with 'same' zero padding and 2x resampling on NCHW tensors.

use super::{Tensor, Var};
use crate::error::{Error, Result};
use super::ops::gemm;
use crate::par;

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geom {
    fn pad(&self) -> usize {
        self.k / 2
    }
}

/// Valid output range along one axis for kernel tap `t`: output index `o`
/// reads input `o + t - pad`.
fn tap_range(t: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t);
    let hi = (len + pad).saturating_sub(t).min(len);
    (lo, hi.max(lo))
}

/// Patch matrix `[ci * k * k, h * w]` of one sample.
fn im2col(xb: &[f64], g: Geom) -> Vec<f64> {
    let Geom { ci, h, w, k, .. } = g;
    let pad = g.pad();
    let plane = h * w;
    let mut cols = vec![0.0; ci * k * k * plane];
    for c in 0..ci {
        let xp = &xb[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (y0, y1) = tap_range(ky, pad, h);
            for kx in 0..k {
                let (x0, x1) = tap_range(kx, pad, w);
                let dst = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for yy in y0..y1 {
                    let sy = yy + ky - pad;
                    dst[yy * w + x0..yy * w + x1].copy_from_slice(&xp[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `gb`.
fn col2im(cols: &[f64], g: Geom, gb: &mut [f64]) {
    let Geom { ci, h, w, k, .. } = g;
    let pad = g.pad();
    let plane = h * w;
    for c in 0..ci {
        let xp = &mut gb[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (y0, y1) = tap_range(ky, pad, h);
            for kx in 0..k {
                let (x0, x1) = tap_range(kx, pad, w);
                let src = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for yy in y0..y1 {
                    let sy = yy + ky - pad;
                    let drow = &mut xp[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                    for (d, &v) in drow.iter_mut().zip(&src[yy * w + x0..yy * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], wt: &[f64], g: Geom) -> Vec<f64> {
    let Geom { n, ci, co, h, w, k } = g;
    let plane = h * w;
    let mut out = vec![0.0; n * co * plane];
    par::for_each_chunk(&mut out, co * plane, |b, ob| {
        let xb = &x[b * ci * plane..(b + 1) * ci * plane];
        let r = if k == 1 {
            gemm(wt, xb, co, ci, plane, false, false)
        } else {
            gemm(wt, &im2col(xb, g), co, ci * k * k, plane, false, false)
        };
        ob.copy_from_slice(&r);
    });
    out
}

fn conv_grad_input(gout: &[f64], wt: &[f64], g: Geom) -> Vec<f64> {
    let Geom { n, ci, co, h, w, k } = g;
    let plane = h * w;
    let mut gx = vec![0.0; n * ci * plane];
    par::for_each_chunk(&mut gx, ci * plane, |b, gb| {
        let go = &gout[b * co * plane..(b + 1) * co * plane];
        let cols = gemm(wt, go, ci * k * k, co, plane, true, false);
        if k == 1 {
            gb.copy_from_slice(&cols);
        } else {
            col2im(&cols, g, gb);
        }
    });
    gx
}

fn conv_grad_weight(gout: &[f64], x: &[f64], g: Geom) -> Vec<f64> {
    let Geom { n, ci, co, h, w, k } = g;
    let plane = h * w;
    let per_out = ci * k * k;
    // per-sample partials, reduced over the batch in index order
    let parts = par::map_range(n, |b| {
        let go = &gout[b * co * plane..(b + 1) * co * plane];
        let xb = &x[b * ci * plane..(b + 1) * ci * plane];
        if k == 1 {
            gemm(go, xb, co, plane, per_out, false, true)
        } else {
            gemm(go, &im2col(xb, g), co, plane, per_out, false, true)
        }
    });
    let mut gw = vec![0.0; co * per_out];
    for p in parts {
        for (a, v) in gw.iter_mut().zip(p) {
            *a += v;
        }
    }
    gw
}

impl<'t> Var<'t> {
    /// `[N, Ci, H, W] * [Co, Ci, k, k] -> [N, Co, H, W]`, odd `k`, zero 'same' padding.
    pub fn conv2d(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let (x, wt) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let g = Geom {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        };
        let y = Tensor::from_parts(vec![g.n, g.co, g.h, g.w], conv_forward(x.data(), wt.data(), g));
        let (xshape, wshape) = (xs.to_vec(), ws.to_vec());
        Ok(self.tape.record(y, &[self, weight], move |gout, need| {
            vec![
                need[0].then(|| Tensor::from_parts(xshape.clone(), conv_grad_input(gout.data(), wt.data(), g))),
                need[1].then(|| Tensor::from_parts(wshape.clone(), conv_grad_weight(gout.data(), x.data(), g))),
            ]
        }))
    }

    /// 2x2 box-filter downsampling of `[N, C, H, W]` (even `H`, `W`).
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Contract(format!("avg_pool2 needs even NCHW, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * ho * wo];
        for p in 0..nc {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = p * h * w + 2 * y * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] =
                        0.25 * (x.data()[i] + x.data()[i + 1] + x.data()[i + w] + x.data()[i + w + 1]);
                }
            }
        }
        let xshape = s.to_vec();
        Ok(self.tape.record(
            Tensor::from_parts(vec![s[0], s[1], ho, wo], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g.data()[(p * ho + y) * wo + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            gx[i] = v;
                            gx[i + 1] = v;
                            gx[i + w] = v;
                            gx[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xshape.clone(), gx))]
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Contract(format!("upsample2 needs NCHW, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; nc * ho * wo];
        for p in 0..nc {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let xshape = s.to_vec();
        Ok(self.tape.record(
            Tensor::from_parts(vec![s[0], s[1], ho, wo], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[(p * h + y / 2) * w + xx / 2] += g.data()[(p * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xshape.clone(), gx))]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    /// Direct definition of the 'same'-padded convolution.
    fn conv_naive(x: &Tensor, w: &Tensor) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, ci, h, wd, co, k) = (xs[0], xs[1], xs[2], xs[3], ws[0], ws[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                        * x.data()[((b * ci + c) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = crate::rng::Rng::new(1);
        for k in [1, 3] {
            let x = Tensor::randn(&[2, 3, 5, 4], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone())).unwrap();
            let want = conv_naive(&x, &w);
            for (a, b) in y.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 5, 3, 3]));
        let err = x.conv2d(w).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"), "{err}");
    }
}

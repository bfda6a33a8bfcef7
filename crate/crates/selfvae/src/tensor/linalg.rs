//! Dense and convolution kernels.
//!
//! All convolution work is routed through three primitive kernels:
//!
//! * [`conv_gather`]   — strided correlation, reducing over the *second*
//!   weight axis. Forward conv, and the input gradient of transposed conv.
//! * [`conv_scatter`]  — the adjoint map, reducing over the *first* weight
//!   axis. Forward transposed conv, and the input gradient of conv.
//! * [`correlate`]     — cross-correlation of two activations, producing a
//!   weight-shaped result. Weight gradients for both directions.
//!
//! Each kernel parallelises over independent output maps; every reduction
//! inside a map runs in a fixed sequential order, so the parallel and
//! sequential builds agree bitwise.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Shape of a conv output: floor((n + 2p - k) / s) + 1.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Shape of a transposed-conv output: (n - 1) * s + k - 2p.
pub fn conv_transpose_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + k - 2 * pad
}

/// out[b, c0, oy, ox] = sum over c1, ky, kx of
///   x[b, c1, oy*s + ky - p, ox*s + kx - p] * w[c0, c1, ky, kx]
#[allow(clippy::too_many_arguments)]
fn conv_gather(
    x: &[f64],
    (bsz, c1n, h, w_): (usize, usize, usize, usize),
    wt: &[f64],
    (c0n, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w_, kw, stride, pad);
    let mut out = vec![0.0; bsz * c0n * ho * wo];
    par::for_each_chunk(&mut out, ho * wo, |m, plane| {
        let b = m / c0n;
        let c0 = m % c0n;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c1 in 0..c1n {
                    let xbase = (b * c1n + c1) * h * w_;
                    let wbase = (c0 * c1n + c1) * kh * kw;
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..kw {
                            let ix = ox * stride + kx;
                            if ix < pad || ix - pad >= w_ {
                                continue;
                            }
                            let ix = ix - pad;
                            acc += x[xbase + iy * w_ + ix] * wt[wbase + ky * kw + kx];
                        }
                    }
                }
                plane[oy * wo + ox] = acc;
            }
        }
    });
    (out, ho, wo)
}

/// out[b, c1, y, x] = sum over c0, ky, kx with oy = (y + p - ky) / s of
///   g[b, c0, oy, ox] * w[c0, c1, ky, kx]   (only exact stride divisions)
#[allow(clippy::too_many_arguments)]
fn conv_scatter(
    g: &[f64],
    (bsz, c0n, ho, wo): (usize, usize, usize, usize),
    wt: &[f64],
    (c1n, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (h, w_): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; bsz * c1n * h * w_];
    par::for_each_chunk(&mut out, h * w_, |m, plane| {
        let b = m / c1n;
        let c1 = m % c1n;
        for y in 0..h {
            for x in 0..w_ {
                let mut acc = 0.0;
                for c0 in 0..c0n {
                    let gbase = (b * c0n + c0) * ho * wo;
                    let wbase = (c0 * c1n + c1) * kh * kw;
                    for ky in 0..kh {
                        let ty = y + pad;
                        if ty < ky || (ty - ky) % stride != 0 {
                            continue;
                        }
                        let oy = (ty - ky) / stride;
                        if oy >= ho {
                            continue;
                        }
                        for kx in 0..kw {
                            let tx = x + pad;
                            if tx < kx || (tx - kx) % stride != 0 {
                                continue;
                            }
                            let ox = (tx - kx) / stride;
                            if ox >= wo {
                                continue;
                            }
                            acc += g[gbase + oy * wo + ox] * wt[wbase + ky * kw + kx];
                        }
                    }
                }
                plane[y * w_ + x] = acc;
            }
        }
    });
    out
}

/// out[cb, cs, ky, kx] = sum over b, y, x of
///   base[b, cb, y, x] * strided[b, cs, y*s + ky - p, x*s + kx - p]
#[allow(clippy::too_many_arguments)]
fn correlate(
    base: &[f64],
    (bsz, cbn, hb, wb): (usize, usize, usize, usize),
    strided: &[f64],
    (csn, hs, ws): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (kh, kw): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; cbn * csn * kh * kw];
    par::for_each_chunk(&mut out, csn * kh * kw, |cb, block| {
        for cs in 0..csn {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for b in 0..bsz {
                        let bbase = (b * cbn + cb) * hb * wb;
                        let sbase = (b * csn + cs) * hs * ws;
                        for y in 0..hb {
                            let sy = y * stride + ky;
                            if sy < pad || sy - pad >= hs {
                                continue;
                            }
                            let sy = sy - pad;
                            for x in 0..wb {
                                let sx = x * stride + kx;
                                if sx < pad || sx - pad >= ws {
                                    continue;
                                }
                                let sx = sx - pad;
                                acc += base[bbase + y * wb + x] * strided[sbase + sy * ws + sx];
                            }
                        }
                    }
                    block[(cs * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    out
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "{} must be rank 4, got {:?}",
            what, s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

impl Tensor {
    /// Matrix product of a [m, k] by a [k, n] tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul needs [m,k]x[k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.data.clone();
        let b = other.data.clone();
        let mut out = vec![0.0; m * n];
        par::for_each_chunk(&mut out, n, |i, row| {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i * k + t] * b[t * n + j];
                }
                row[j] = acc;
            }
        });
        Ok(Tensor::record(
            &[self, other],
            out,
            vec![m, n],
            move |g, ids, store| {
                if ids[0] != usize::MAX {
                    let acc = store.accum(ids[0]);
                    for i in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b[t * n + j];
                            }
                            acc[i * k + t] += s;
                        }
                    }
                }
                if ids[1] != usize::MAX {
                    let acc = store.accum(ids[1]);
                    for t in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += a[i * k + t] * g[i * n + j];
                            }
                            acc[t * n + j] += s;
                        }
                    }
                }
            },
        ))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `self` is [B, Cin, H, W], `weight` is [Cout, Cin, kh, kw].
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (bsz, cin, h, w_) = dims4(self, "conv2d input")?;
        let (cout, wcin, kh, kw) = dims4(weight, "conv2d weight")?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d channels: input has {}, weight expects {}",
                cin, wcin
            )));
        }
        if h + 2 * pad < kh || w_ + 2 * pad < kw || stride == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel {}x{} stride {} does not fit {}x{} (pad {})",
                kh, kw, stride, h, w_, pad
            )));
        }
        let x = self.data.clone();
        let wt = weight.data.clone();
        let (out, ho, wo) = conv_gather(&x, (bsz, cin, h, w_), &wt, (cout, kh, kw), stride, pad);
        Ok(Tensor::record(
            &[self, weight],
            out,
            vec![bsz, cout, ho, wo],
            move |g, ids, store| {
                if ids[0] != usize::MAX {
                    let din = conv_scatter(
                        g,
                        (bsz, cout, ho, wo),
                        &wt,
                        (cin, kh, kw),
                        stride,
                        pad,
                        (h, w_),
                    );
                    let acc = store.accum(ids[0]);
                    for (a, d) in acc.iter_mut().zip(din.iter()) {
                        *a += d;
                    }
                }
                if ids[1] != usize::MAX {
                    let dw = correlate(
                        g,
                        (bsz, cout, ho, wo),
                        &x,
                        (cin, h, w_),
                        stride,
                        pad,
                        (kh, kw),
                    );
                    let acc = store.accum(ids[1]);
                    for (a, d) in acc.iter_mut().zip(dw.iter()) {
                        *a += d;
                    }
                }
            },
        ))
    }

    /// 2-D transposed convolution (the adjoint of [`Tensor::conv2d`]).
    ///
    /// `self` is [B, Cin, H, W], `weight` is [Cin, Cout, kh, kw].
    pub fn conv2d_transpose(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (bsz, cin, h, w_) = dims4(self, "conv2d_transpose input")?;
        let (wcin, cout, kh, kw) = dims4(weight, "conv2d_transpose weight")?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d_transpose channels: input has {}, weight expects {}",
                cin, wcin
            )));
        }
        if stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(Error::shape("conv2d_transpose output would be empty"));
        }
        let ho = conv_transpose_out_dim(h, kh, stride, pad);
        let wo = conv_transpose_out_dim(w_, kw, stride, pad);
        let x = self.data.clone();
        let wt = weight.data.clone();
        let out = conv_scatter(
            &x,
            (bsz, cin, h, w_),
            &wt,
            (cout, kh, kw),
            stride,
            pad,
            (ho, wo),
        );
        Ok(Tensor::record(
            &[self, weight],
            out,
            vec![bsz, cout, ho, wo],
            move |g, ids, store| {
                if ids[0] != usize::MAX {
                    let (din, dh, dw_) =
                        conv_gather(g, (bsz, cout, ho, wo), &wt, (cin, kh, kw), stride, pad);
                    debug_assert_eq!((dh, dw_), (h, w_));
                    let acc = store.accum(ids[0]);
                    for (a, d) in acc.iter_mut().zip(din.iter()) {
                        *a += d;
                    }
                }
                if ids[1] != usize::MAX {
                    let dw = correlate(
                        &x,
                        (bsz, cin, h, w_),
                        g,
                        (cout, ho, wo),
                        stride,
                        pad,
                        (kh, kw),
                    );
                    let acc = store.accum(ids[1]);
                    for (a, d) in acc.iter_mut().zip(dw.iter()) {
                        *a += d;
                    }
                }
            },
        ))
    }

    /// Global average pool: [B, C, H, W] -> [B, C, 1, 1].
    pub fn global_average_pool(&self) -> Result<Tensor> {
        let (bsz, c, h, w_) = dims4(self, "global_average_pool input")?;
        let x = self.data();
        let hw = h * w_;
        let out: Vec<f64> = par::map_indexed(bsz * c, |m| {
            par::pairwise_sum(&x[m * hw..(m + 1) * hw]) / hw as f64
        });
        Ok(Tensor::record(
            &[self],
            out,
            vec![bsz, c, 1, 1],
            move |g, ids, store| {
                let acc = store.accum(ids[0]);
                for m in 0..bsz * c {
                    let gv = g[m] / hw as f64;
                    for i in 0..hw {
                        acc[m * hw + i] += gv;
                    }
                }
            },
        ))
    }
}

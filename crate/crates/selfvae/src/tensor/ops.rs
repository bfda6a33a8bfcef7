//! Elementwise and shape operations with trailing-aligned broadcasting.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;
use std::sync::Arc;

/// Broadcast result shape for trailing-aligned shapes `a` and `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides of `shape` aligned to `out_rank` trailing dims, with 0
/// where the dimension is broadcast.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        let out_i = rank - shape.len() + i;
        strides[out_i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visit every output element in row-major order with the matching source
/// indices for two broadcast operands.
fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in 0..n {
        f(o, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    fn unary<Fwd, Bwd>(&self, fwd: Fwd, bwd: Bwd) -> Tensor
    where
        Fwd: Fn(f64) -> f64 + Sync + Send,
        Bwd: Fn(f64, f64) -> f64 + 'static,
    {
        let out = par::map_slice(self.data(), &fwd);
        let xin = self.data.clone();
        let ydata: Arc<Vec<f64>> = Arc::new(out.clone());
        let shape = self.shape().to_vec();
        Tensor::record(&[self], out, shape, move |g, ids, store| {
            let acc = store.accum(ids[0]);
            for i in 0..g.len() {
                acc[i] += g[i] * bwd(xin[i], ydata[i]);
            }
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// softplus(x) = ln(1 + e^x), computed as max(x,0) + ln1p(e^-|x|).
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid_scalar(x),
        )
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    /// Elementwise a*x + b with scalar coefficients.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        self.unary(move |x| a * x + b, move |_, _| a)
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.affine(a, 0.0)
    }

    pub fn add_scalar(&self, b: f64) -> Tensor {
        self.affine(1.0, b)
    }

    /// x^p for a fixed scalar exponent.
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Clamp into [lo, hi]. Gradient passes through inside the interval
    /// (inclusive) and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.clamp(lo, f64::INFINITY)
    }

    fn binary<Fwd, Da, Db>(&self, other: &Tensor, fwd: Fwd, da: Da, db: Db) -> Result<Tensor>
    where
        Fwd: Fn(f64, f64) -> f64,
        Da: Fn(f64, f64) -> f64 + 'static,
        Db: Fn(f64, f64) -> f64 + 'static,
    {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        if self.shape() == other.shape() {
            let a = self.data();
            let b = other.data();
            for i in 0..n {
                out[i] = fwd(a[i], b[i]);
            }
        } else {
            let a = self.data();
            let b = other.data();
            for_each_broadcast2(&out_shape, self.shape(), other.shape(), |o, ia, ib| {
                out[o] = fwd(a[ia], b[ib]);
            });
        }
        let a_data = self.data.clone();
        let b_data = other.data.clone();
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let out_shape_c = out_shape.clone();
        Ok(Tensor::record(
            &[self, other],
            out,
            out_shape,
            move |g, ids, store| {
                if ids[0] != usize::MAX {
                    let acc = store.accum(ids[0]);
                    for_each_broadcast2(&out_shape_c, &a_shape, &b_shape, |o, ia, ib| {
                        acc[ia] += g[o] * da(a_data[ia], b_data[ib]);
                    });
                }
                if ids[1] != usize::MAX {
                    let acc = store.accum(ids[1]);
                    for_each_broadcast2(&out_shape_c, &a_shape, &b_shape, |o, ia, ib| {
                        acc[ib] += g[o] * db(a_data[ia], b_data[ib]);
                    });
                }
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise maximum; the gradient follows the winning side (ties go
    /// to the left operand).
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            |a, b| a.max(b),
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a >= b { 0.0 } else { 1.0 },
        )
    }

    /// View with a new shape (same element count). No data copy.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let data = self.data.as_ref().clone();
        Ok(Tensor::record(
            &[self],
            data,
            shape.to_vec(),
            move |g, ids, store| {
                let acc = store.accum(ids[0]);
                for i in 0..g.len() {
                    acc[i] += g[i];
                }
            },
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::shape(format!(
                "invalid permutation {:?} for rank {}",
                perm, rank
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let map = permute_index_map(&in_shape, perm);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (o, &src) in map.iter().enumerate() {
            out[o] = x[src];
        }
        let map = Arc::new(map);
        Ok(Tensor::record(&[self], out, out_shape, move |g, ids, store| {
            let acc = store.accum(ids[0]);
            for (o, &src) in map.iter().enumerate() {
                acc[src] += g[o];
            }
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice axis {} [{}, {}) out of range for {:?}",
                axis,
                start,
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let x = self.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * shape[axis] + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
        }
        let axis_len = shape[axis];
        Ok(Tensor::record(&[self], out, out_shape, move |g, ids, store| {
            let acc = store.accum(ids[0]);
            for o in 0..outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * len * inner;
                for i in 0..len * inner {
                    acc[dst + i] += g[src + i];
                }
            }
        }))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {} out of range", axis)));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::shape(format!(
                        "concat shapes {:?} vs {:?} differ off-axis",
                        p.shape(),
                        first.shape()
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let alen = p.shape()[axis];
            let x = p.data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let src = o * alen * inner;
                out[dst..dst + alen * inner].copy_from_slice(&x[src..src + alen * inner]);
            }
            spans.push((offset, alen));
            offset += alen;
        }
        Ok(Tensor::record(parts, out, out_shape, move |g, ids, store| {
            for (k, &(off, alen)) in spans.iter().enumerate() {
                if ids[k] == usize::MAX {
                    continue;
                }
                let acc = store.accum(ids[k]);
                for o in 0..outer {
                    let src = (o * axis_total + off) * inner;
                    let dst = o * alen * inner;
                    for i in 0..alen * inner {
                        acc[dst + i] += g[src + i];
                    }
                }
            }
        }))
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For each output linear index, the source linear index under `perm`.
fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let n: usize = in_shape.iter().product();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for item in map.iter_mut() {
        *item = src;
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

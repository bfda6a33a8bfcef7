//! Weight-normalized convolution layers with data-dependent initialization.
//!
//! Every conv in the encoder/decoder stacks carries its weight as a
//! direction `v`, a per-output-channel gain `g`, and a bias `b`; the
//! effective kernel is `w = g * v / ||v||` (norm per output channel).
//! Data-dependent init ([`WnConv2d::ddi`]) rescales `g` and shifts `b` so
//! the layer's pre-activation is per-channel standardized on a real batch.

use crate::error::Result;
use crate::store::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Scale of the direction initialization (the conventional choice for
/// weight-normalized nets; the gain is fixed by data-dependent init).
const V_INIT_STD: f64 = 0.05;
/// Channels with standard deviation below this are treated as degenerate.
const DDI_STD_FLOOR: f64 = 1e-8;

fn gauss_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Per-channel mean and population std over batch and spatial axes of a
/// [B, C, H, W] tensor.
pub(crate) fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = t.data();
    let n = (b * h * w) as f64;
    let mut means = vec![0.0; c];
    let mut stds = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * h * w;
            for i in 0..h * w {
                sum += data[base + i];
            }
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * h * w;
            for i in 0..h * w {
                let d = data[base + i] - mean;
                sq += d * d;
            }
        }
        means[ch] = mean;
        stds[ch] = (sq / n).sqrt();
    }
    (means, stds)
}

/// Standardize one output channel's gain/bias from measured statistics;
/// degenerate channels fall back to g = 1, b = -mean.
fn ddi_update(store: &mut ParamStore, g: ParamId, b: ParamId, means: &[f64], stds: &[f64]) {
    for (ch, (&mean, &std)) in means.iter().zip(stds.iter()).enumerate() {
        if std < DDI_STD_FLOOR {
            store.value_mut(g)[ch] = 1.0;
            store.value_mut(b)[ch] = -mean;
        } else {
            store.value_mut(g)[ch] /= std;
            let bv = store.value_mut(b)[ch];
            store.value_mut(b)[ch] = (bv - mean) / std;
        }
    }
}

/// Weight-normalized 2-D convolution.
#[derive(Clone)]
pub struct WnConv2d {
    v: ParamId,
    g: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl WnConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let v = store.add(
            &format!("{name}.v"),
            &[c_out, c_in, kernel, kernel],
            gauss_vec(rng, c_out * c_in * kernel * kernel, V_INIT_STD),
        )?;
        let g = store.add(&format!("{name}.g"), &[c_out], vec![1.0; c_out])?;
        let b = store.add(&format!("{name}.b"), &[c_out], vec![0.0; c_out])?;
        Ok(Self {
            v,
            g,
            b,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    /// Effective kernel g * v / ||v|| (norm per output channel).
    pub fn effective_weight(&self, bind: &Binding) -> Result<Tensor> {
        let v = bind.get(self.v);
        let g = bind.get(self.g);
        let flat = self.c_in * self.kernel * self.kernel;
        let norm = v
            .square()
            .reshape(&[self.c_out, flat])?
            .sum_last_axis()
            .sqrt();
        let scale = g.div(&norm)?.reshape(&[self.c_out, 1, 1, 1])?;
        v.mul(&scale)
    }

    pub fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight(bind)?;
        let b = bind.get(self.b).reshape(&[self.c_out, 1, 1])?;
        x.conv2d(&w, self.stride, self.pad)?.add(&b)
    }

    /// Data-dependent init: standardize this layer's pre-activation on
    /// `x`, then return the re-evaluated pre-activation.
    pub fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let t = self.apply(&store.bind_const(), x)?;
        let (means, stds) = channel_stats(&t);
        ddi_update(store, self.g, self.b, &means, &stds);
        self.apply(&store.bind_const(), x)
    }
}

/// Weight-normalized 2-D transposed convolution.
#[derive(Clone)]
pub struct WnConvT2d {
    v: ParamId,
    g: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl WnConvT2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let v = store.add(
            &format!("{name}.v"),
            &[c_in, c_out, kernel, kernel],
            gauss_vec(rng, c_in * c_out * kernel * kernel, V_INIT_STD),
        )?;
        let g = store.add(&format!("{name}.g"), &[c_out], vec![1.0; c_out])?;
        let b = store.add(&format!("{name}.b"), &[c_out], vec![0.0; c_out])?;
        Ok(Self {
            v,
            g,
            b,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    /// Effective kernel with the norm taken per *output* channel, which is
    /// axis 1 of a transposed-conv weight.
    pub fn effective_weight(&self, bind: &Binding) -> Result<Tensor> {
        let v = bind.get(self.v);
        let g = bind.get(self.g);
        let flat = self.c_in * self.kernel * self.kernel;
        let norm = v
            .permute(&[1, 0, 2, 3])?
            .square()
            .reshape(&[self.c_out, flat])?
            .sum_last_axis()
            .sqrt();
        let scale = g.div(&norm)?.reshape(&[1, self.c_out, 1, 1])?;
        v.mul(&scale)
    }

    pub fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight(bind)?;
        let b = bind.get(self.b).reshape(&[self.c_out, 1, 1])?;
        x.conv2d_transpose(&w, self.stride, self.pad)?.add(&b)
    }

    pub fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let t = self.apply(&store.bind_const(), x)?;
        let (means, stds) = channel_stats(&t);
        ddi_update(store, self.g, self.b, &means, &stds);
        self.apply(&store.bind_const(), x)
    }
}

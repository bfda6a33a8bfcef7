//! RealNVP bijective prior: affine coupling layers with checkerboard
//! masks, exact inverses, and change-of-variables log-density accounting.
//!
//! Each coupling layer splits the (flattened) latent by a binary mask,
//! feeds the masked half through small plain MLPs to produce a scale and a
//! translation for the unmasked half, and applies `z = x * exp(s) + t`
//! there. The scale is tanh-squashed and multiplied by a learnable bound.
//! Final MLP layers start at zero, so a freshly built stack is exactly the
//! identity with zero log-det.
//!
//! The coupling nets are deliberately *plain* linear layers: the identity
//! initialization needs exactly-zero final weights, which is incompatible
//! with the weight-normalized parameterization used in the conv stacks.

use crate::dist::{sample_standard_normal, std_normal_log_prob};
use crate::error::{Error, Result};
use crate::store::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// `scale == 0` zero-initializes the weights (used for final layers).
    fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w_init: Vec<f64> = (0..d_in * d_out)
            .map(|_| {
                if scale == 0.0 {
                    0.0
                } else {
                    scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
                }
            })
            .collect();
        let w = store.add(&format!("{name}.w"), &[d_in, d_out], w_init)?;
        let b = store.add(&format!("{name}.b"), &[d_out], vec![0.0; d_out])?;
        Ok(Self { w, b })
    }

    fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        x.matmul(bind.get(self.w))?.add(bind.get(self.b))
    }
}

/// Two-hidden-layer ELU MLP whose final layer starts at zero.
#[derive(Clone)]
struct CouplingNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl CouplingNet {
    fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s1 = 1.0 / (dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            l1: Linear::build(store, &format!("{name}.l1"), dim, hidden, s1, rng)?,
            l2: Linear::build(store, &format!("{name}.l2"), hidden, hidden, s2, rng)?,
            l3: Linear::build(store, &format!("{name}.l3"), hidden, dim, 0.0, rng)?,
        })
    }

    fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.apply(bind, x)?.elu();
        let h = self.l2.apply(bind, &h)?.elu();
        self.l3.apply(bind, &h)
    }
}

/// One affine coupling layer.
#[derive(Clone)]
pub struct CouplingLayer {
    mask: Tensor,
    inv_mask: Tensor,
    scale_net: CouplingNet,
    translate_net: CouplingNet,
    bound: ParamId,
}

impl CouplingLayer {
    fn nets(&self, bind: &Binding, masked: &Tensor) -> Result<(Tensor, Tensor)> {
        let raw_s = self.scale_net.apply(bind, masked)?;
        let s = raw_s
            .tanh()
            .mul(bind.get(self.bound))?
            .mul(&self.inv_mask)?;
        let t = self.translate_net.apply(bind, masked)?.mul(&self.inv_mask)?;
        Ok((s, t))
    }

    fn forward(&self, bind: &Binding, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let masked = x.mul(&self.mask)?;
        let (s, t) = self.nets(bind, &masked)?;
        let moved = x.mul(&s.exp())?.add(&t)?.mul(&self.inv_mask)?;
        let z = masked.add(&moved)?;
        Ok((z, s.sum_last_axis()))
    }

    fn inverse(&self, bind: &Binding, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let masked = z.mul(&self.mask)?;
        let (s, t) = self.nets(bind, &masked)?;
        let moved = z.sub(&t)?.mul(&s.neg().exp())?.mul(&self.inv_mask)?;
        let v = masked.add(&moved)?;
        Ok((v, s.sum_last_axis().neg()))
    }
}

/// Ordered stack of coupling layers over a standard-normal base.
#[derive(Clone)]
pub struct FlowStack {
    layers: Vec<CouplingLayer>,
    dim: usize,
}

/// Checkerboard mask for one layer: spatial (h+w) parity for [C, H, W]
/// latents (shared across channels), index parity for flat ones; the
/// parity alternates per layer.
fn checkerboard_mask(latent_shape: &[usize], layer: usize) -> Vec<f64> {
    match latent_shape.len() {
        3 => {
            let (c, h, w) = (latent_shape[0], latent_shape[1], latent_shape[2]);
            let mut mask = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if (y + x) % 2 == layer % 2 {
                            mask[(ci * h + y) * w + x] = 1.0;
                        }
                    }
                }
            }
            mask
        }
        _ => {
            let d: usize = latent_shape.iter().product();
            (0..d)
                .map(|i| if i % 2 == layer % 2 { 1.0 } else { 0.0 })
                .collect()
        }
    }
}

impl FlowStack {
    /// Register a stack of `num_layers` coupling layers for a latent of
    /// the given shape (flattened to `D` internally).
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        latent_shape: &[usize],
        num_layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dim: usize = latent_shape.iter().product();
        if dim < 2 {
            return Err(Error::config("flow needs a latent of at least 2 dims"));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mask_v = checkerboard_mask(latent_shape, l);
            let inv_v: Vec<f64> = mask_v.iter().map(|&m| 1.0 - m).collect();
            let name = format!("{scope}.layer{l}");
            layers.push(CouplingLayer {
                mask: Tensor::from_vec(mask_v, &[dim]),
                inv_mask: Tensor::from_vec(inv_v, &[dim]),
                scale_net: CouplingNet::build(store, &format!("{name}.scale"), dim, hidden, rng)?,
                translate_net: CouplingNet::build(
                    store,
                    &format!("{name}.translate"),
                    dim,
                    hidden,
                    rng,
                )?,
                bound: store.add(&format!("{name}.bound"), &[1], vec![1.0])?,
            });
        }
        Ok(Self { layers, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, v: &Tensor) -> Result<()> {
        if v.shape().len() != 2 || v.shape()[1] != self.dim {
            return Err(Error::shape(format!(
                "flow expects [B, {}], got {:?}",
                self.dim,
                v.shape()
            )));
        }
        Ok(())
    }

    /// v -> z with the accumulated forward log-det, per sample.
    pub fn forward(&self, bind: &Binding, v: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(v)?;
        let mut x = v.clone();
        let mut log_det = Tensor::zeros(&[v.shape()[0]]);
        for layer in &self.layers {
            let (next, ld) = layer.forward(bind, &x)?;
            x = next;
            log_det = log_det.add(&ld)?;
        }
        Ok((x, log_det))
    }

    /// z -> v with the accumulated inverse log-det, per sample.
    pub fn inverse(&self, bind: &Binding, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(z)?;
        let mut x = z.clone();
        let mut log_det = Tensor::zeros(&[z.shape()[0]]);
        for layer in self.layers.iter().rev() {
            let (prev, ld) = layer.inverse(bind, &x)?;
            x = prev;
            log_det = log_det.add(&ld)?;
        }
        Ok((x, log_det))
    }

    /// Change-of-variables density: log p(z) = log p_V(f^-1(z)) + log|det df^-1/dz|.
    pub fn log_prob(&self, bind: &Binding, z: &Tensor) -> Result<Tensor> {
        let (v, log_det_inv) = self.inverse(bind, z)?;
        std_normal_log_prob(&v)?.add(&log_det_inv)
    }

    /// Draw from the base and push forward through the stack.
    pub fn sample<R: Rng>(&self, bind: &Binding, rng: &mut R, batch: usize) -> Result<Tensor> {
        let v = sample_standard_normal(rng, &[batch, self.dim]);
        Ok(self.forward(bind, &v)?.0)
    }
}

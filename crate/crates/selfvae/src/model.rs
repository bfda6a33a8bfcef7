//! Model assembly: learnable priors over the top latent, the plain VAE
//! with a learned prior, and the self-supervised hierarchical VAE whose
//! intermediate variables are deterministic transforms of the input.
//!
//! Level indexing follows the generative story: `y_1` is the coarsest
//! level, `y_{K+1} = x` is the data, `z_0 = u` is the top latent, and
//! `d_k` maps `y_{k+1}` down to `y_k`. Transform chains are stored in
//! *applied* order (the first entry acts on `x`), matching
//! [`crate::transforms::apply_chain`]; [`SelfVaeModel::levels`] returns
//! the resulting tensors coarsest-first so `levels[k]` is `y_{k+1}`.

use crate::dist::{self, DiagGaussianParams, MoGPriorParams};
use crate::error::{Error, Result};
use crate::flow::FlowStack;
use crate::nets::{CondGaussianNet, CondImageDecoder, GaussianEncoder, ImageDecoder, NetConfig};
use crate::store::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transforms::{ImageU8, TransformSpec};
use rand::Rng;

/// Map raw pixel values {0..255} onto the network input range [-1, 1],
/// the same scaling the discretized-logistic likelihood uses internally.
pub fn normalize_pixels(x: &Tensor) -> Tensor {
    x.affine(2.0 / 255.0, -1.0)
}

/// Which density sits over the top latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// Standard normal, no parameters.
    Fixed,
    /// Mixture of diagonal Gaussians.
    Mog,
    /// RealNVP coupling-layer flow over a standard-normal base.
    RealNvp,
}

/// Sizing for [`Prior::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub mog_components: usize,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            kind: PriorKind::RealNvp,
            flow_layers: 6,
            flow_hidden: 256,
            mog_components: 8,
        }
    }
}

/// A density over the flattened top latent.
#[derive(Clone)]
pub enum Prior {
    Fixed {
        dim: usize,
    },
    Mog {
        means: ParamId,
        log_sigmas: ParamId,
        logit_weights: ParamId,
        dim: usize,
        components: usize,
    },
    RealNvp(FlowStack),
}

impl Prior {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        latent_shape: (usize, usize, usize),
        spec: &PriorSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, h, w) = latent_shape;
        let dim = c * h * w;
        match spec.kind {
            PriorKind::Fixed => Ok(Prior::Fixed { dim }),
            PriorKind::Mog => {
                let k = spec.mog_components;
                if k == 0 {
                    return Err(Error::config("mixture prior needs at least one component"));
                }
                // spread the component means a little so they can specialize
                let means: Vec<f64> = (0..k * dim)
                    .map(|_| 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Ok(Prior::Mog {
                    means: store.add(&format!("{scope}.means"), &[k, dim], means)?,
                    log_sigmas: store.add(
                        &format!("{scope}.log_sigmas"),
                        &[k, dim],
                        vec![0.0; k * dim],
                    )?,
                    logit_weights: store.add(&format!("{scope}.logit_weights"), &[k], vec![0.0; k])?,
                    dim,
                    components: k,
                })
            }
            PriorKind::RealNvp => Ok(Prior::RealNvp(FlowStack::build(
                store,
                scope,
                &[c, h, w],
                spec.flow_layers,
                spec.flow_hidden,
                rng,
            )?)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Fixed { dim } => *dim,
            Prior::Mog { dim, .. } => *dim,
            Prior::RealNvp(flow) => flow.dim(),
        }
    }

    fn flatten(&self, u: &Tensor) -> Result<Tensor> {
        let b = u.shape().first().copied().unwrap_or(0);
        if u.numel() != b * self.dim() {
            return Err(Error::shape(format!(
                "latent {:?} does not flatten to [{b}, {}]",
                u.shape(),
                self.dim()
            )));
        }
        u.reshape(&[b, self.dim()])
    }

    fn mog_params(&self, bind: &Binding) -> Result<MoGPriorParams> {
        match self {
            Prior::Mog {
                means,
                log_sigmas,
                logit_weights,
                ..
            } => MoGPriorParams::new(
                bind.get(*means).clone(),
                bind.get(*log_sigmas).clone(),
                bind.get(*logit_weights).clone(),
            ),
            _ => Err(Error::contract("not a mixture prior")),
        }
    }

    /// Per-sample log density of a latent batch (any shape flattening to
    /// [B, dim]).
    pub fn log_prob(&self, bind: &Binding, u: &Tensor) -> Result<Tensor> {
        let flat = self.flatten(u)?;
        match self {
            Prior::Fixed { .. } => dist::std_normal_log_prob(&flat),
            Prior::Mog { .. } => dist::mog_log_prob(&self.mog_params(bind)?, &flat),
            Prior::RealNvp(flow) => flow.log_prob(bind, &flat),
        }
    }

    /// Draw `n` latents as a constant `[n, dim]` tensor.
    pub fn sample<R: Rng>(&self, bind: &Binding, rng: &mut R, n: usize) -> Result<Tensor> {
        match self {
            Prior::Fixed { dim } => Ok(dist::sample_standard_normal(rng, &[n, *dim])),
            Prior::Mog {
                dim, components, ..
            } => {
                let p = self.mog_params(bind)?;
                let logits = p.logit_weights.data();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                let total: f64 = weights.iter().sum();
                let means = p.means.data();
                let log_sigmas = p.log_sigmas.data();
                let mut out = vec![0.0; n * dim];
                for row in out.chunks_exact_mut(*dim) {
                    let pick = rng.gen::<f64>() * total;
                    let mut acc = 0.0;
                    let mut k = components - 1;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w;
                        if pick < acc {
                            k = j;
                            break;
                        }
                    }
                    for (d, slot) in row.iter_mut().enumerate() {
                        let eps: f64 = rng.sample(rand_distr::StandardNormal);
                        *slot = means[k * dim + d] + log_sigmas[k * dim + d].exp() * eps;
                    }
                }
                Ok(Tensor::from_vec(out, &[n, *dim]))
            }
            Prior::RealNvp(flow) => flow.sample(bind, rng, n),
        }
    }

    /// The space interpolation happens in: the flow's base space when
    /// there is a flow, otherwise the latent space itself.
    pub fn to_base(&self, bind: &Binding, u: &Tensor) -> Result<Tensor> {
        let flat = self.flatten(u)?;
        match self {
            Prior::RealNvp(flow) => Ok(flow.inverse(bind, &flat)?.0),
            _ => Ok(flat),
        }
    }

    pub fn from_base(&self, bind: &Binding, v: &Tensor) -> Result<Tensor> {
        match self {
            Prior::RealNvp(flow) => Ok(flow.forward(bind, v)?.0),
            _ => Ok(v.clone()),
        }
    }
}

/// Number of factor-2 downsamplings between an input resolution and the
/// latent resolution (must match on both axes).
fn stages_between(hw: (usize, usize), latent: (usize, usize, usize)) -> Result<usize> {
    let down = |from: usize, to: usize| -> Result<usize> {
        if to == 0 || from < to || from % to != 0 || !(from / to).is_power_of_two() {
            return Err(Error::config(format!(
                "{from} is not {to} times a power of two"
            )));
        }
        Ok((from / to).trailing_zeros() as usize)
    };
    let h = down(hw.0, latent.1)?;
    let w = down(hw.1, latent.2)?;
    if h != w {
        return Err(Error::config(format!(
            "downsampling differs per axis: {h} vs {w}"
        )));
    }
    Ok(h)
}

fn cfg_with_stages(cfg: &NetConfig, stages: usize) -> NetConfig {
    NetConfig {
        stages,
        ..cfg.clone()
    }
}

/// Batch variant of the transform chain: splits `[B, C, H, W]` integer
/// pixels into images, applies the chain, and restacks every level.
/// Returns `K + 1` tensors ordered coarsest-first, the last being `x`.
pub fn transform_levels(x: &Tensor, specs: &[TransformSpec]) -> Result<Vec<Tensor>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut level_data: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
    let mut level_shape: Vec<(usize, usize, usize)> = vec![(0, 0, 0); specs.len()];
    for bi in 0..b {
        let img = ImageU8::from_tensor_chw(
            &x.slice_axis(0, bi, 1)?.reshape(&[c, h, w])?,
        )?;
        let chain = crate::transforms::apply_chain(&img, specs)?;
        for (j, lvl) in chain.iter().enumerate() {
            let t = lvl.to_tensor_chw();
            level_shape[j] = (lvl.channels, lvl.height, lvl.width);
            level_data[j].extend_from_slice(&t.data()[..]);
        }
    }
    // chain runs fine-to-coarse; re-index into coarsest-first levels
    let mut out = Vec::with_capacity(specs.len() + 1);
    for j in (0..specs.len()).rev() {
        let (lc, lh, lw) = level_shape[j];
        out.push(Tensor::from_vec(
            std::mem::take(&mut level_data[j]),
            &[b, lc, lh, lw],
        ));
    }
    out.push(Tensor::from_vec(x.data().to_vec(), &[b, c, h, w]));
    debug_assert_eq!(out.len(), specs.len() + 1);
    Ok(out)
}

/// Plain VAE with a learned prior over its single latent.
pub struct VaeModel {
    pub encoder: GaussianEncoder,
    pub decoder: ImageDecoder,
    pub prior: Prior,
    pub input: (usize, usize, usize),
    pub latent: (usize, usize, usize),
    pub components: usize,
}

impl VaeModel {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        input: (usize, usize, usize),
        cfg: &NetConfig,
        prior: &PriorSpec,
        components: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let latent = cfg.latent_shape;
        let stages = stages_between((input.1, input.2), latent)?;
        let cfg = cfg_with_stages(cfg, stages);
        let encoder = GaussianEncoder::build(
            store,
            &format!("{scope}.encoder"),
            input.0,
            (input.1, input.2),
            &cfg,
            rng,
        )?;
        let decoder = ImageDecoder::build(
            store,
            &format!("{scope}.decoder"),
            latent,
            input.0,
            (input.1, input.2),
            components,
            &cfg,
            rng,
        )?;
        let prior = Prior::build(store, &format!("{scope}.prior"), latent, prior, rng)?;
        Ok(Self {
            encoder,
            decoder,
            prior,
            input,
            latent,
            components,
        })
    }

    /// Build a VAE view over already-registered sub-networks (used when a
    /// hierarchical model's top level is treated as a VAE on y).
    pub fn from_parts(
        encoder: GaussianEncoder,
        decoder: ImageDecoder,
        prior: Prior,
        input: (usize, usize, usize),
        components: usize,
    ) -> Self {
        let latent = encoder.latent_shape();
        Self {
            encoder,
            decoder,
            prior,
            input,
            latent,
            components,
        }
    }

    /// Noise for one evaluation, shaped like the latent.
    pub fn draw_eps<R: Rng>(&self, batch: usize, rng: &mut R) -> Tensor {
        let (c, h, w) = self.latent;
        dist::sample_standard_normal(rng, &[batch, c, h, w])
    }

    /// Per-sample importance log-weight log p(x|z) + log p(z) - log q(z|x)
    /// at z = mu + sigma * eps.
    pub fn log_weight_with_eps(&self, bind: &Binding, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let q = self.encoder.apply(bind, &normalize_pixels(x))?;
        let z = dist::reparameterize(&q, eps)?;
        let re = dist::dlogistic_log_prob(&self.decoder.apply(bind, &z)?, x)?;
        let log_p = self.prior.log_prob(bind, &z)?;
        let log_q = dist::gaussian_log_prob(&q, &z)?;
        re.add(&log_p)?.sub(&log_q)
    }

    /// Data-dependent init in generative order on one batch.
    pub fn ddi<R: Rng>(&self, store: &mut ParamStore, x: &Tensor, rng: &mut R) -> Result<()> {
        let q = self.encoder.ddi(store, &normalize_pixels(x))?;
        let eps = self.draw_eps(x.shape()[0], rng);
        let z = dist::reparameterize(&q, &eps)?;
        self.decoder.ddi(store, &z)?;
        Ok(())
    }
}

/// Self-supervised hierarchical VAE over K deterministic transforms.
pub struct SelfVaeModel {
    /// Transform chain in applied order (first entry acts on x).
    pub transforms: Vec<TransformSpec>,
    /// Shapes of y_1 .. y_{K+1}=x, coarsest first.
    pub level_shapes: Vec<(usize, usize, usize)>,
    /// q(u | y_1)
    pub q_u: GaussianEncoder,
    /// q(z_k | y_{k+1}), k = 1..K
    pub q_z: Vec<GaussianEncoder>,
    /// p(y_1 | u)
    pub p_y1: ImageDecoder,
    /// p(z_k | y_k, z_{k-1}) with z_0 = u, k = 1..K
    pub p_z: Vec<CondGaussianNet>,
    /// p(y_{k+1} | y_k, z_k), k = 1..K (k = K emits x)
    pub p_y: Vec<CondImageDecoder>,
    /// Prior over u.
    pub prior: Prior,
    pub latent: (usize, usize, usize),
    pub components: usize,
}

impl SelfVaeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        input: (usize, usize, usize),
        transforms: Vec<TransformSpec>,
        cfg: &NetConfig,
        prior: &PriorSpec,
        components: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k_levels = transforms.len();
        if k_levels == 0 {
            return Err(Error::config(
                "a self-supervised model needs at least one transform",
            ));
        }
        // shape chain in applied order, then re-indexed coarsest-first
        let mut chain = vec![input];
        for spec in &transforms {
            let next = spec.out_shape(*chain.last().unwrap())?;
            chain.push(next);
        }
        let level_shapes: Vec<(usize, usize, usize)> = chain.into_iter().rev().collect();
        let latent = cfg.latent_shape;

        let (c1, h1, w1) = level_shapes[0];
        let q_u = GaussianEncoder::build(
            store,
            &format!("{scope}.q_u"),
            c1,
            (h1, w1),
            &cfg_with_stages(cfg, stages_between((h1, w1), latent)?),
            rng,
        )?;
        let p_y1 = ImageDecoder::build(
            store,
            &format!("{scope}.p_y1"),
            latent,
            c1,
            (h1, w1),
            components,
            cfg,
            rng,
        )?;
        let mut q_z = Vec::with_capacity(k_levels);
        let mut p_z = Vec::with_capacity(k_levels);
        let mut p_y = Vec::with_capacity(k_levels);
        for k in 1..=k_levels {
            let (fc, fh, fw) = level_shapes[k];
            let (cc, ch, cw) = level_shapes[k - 1];
            q_z.push(GaussianEncoder::build(
                store,
                &format!("{scope}.q_z{k}"),
                fc,
                (fh, fw),
                &cfg_with_stages(cfg, stages_between((fh, fw), latent)?),
                rng,
            )?);
            p_z.push(CondGaussianNet::build(
                store,
                &format!("{scope}.p_z{k}"),
                cc,
                (ch, cw),
                Some(latent),
                latent,
                cfg,
                rng,
            )?);
            // named by output level: p(y_{k+1} | y_k, z_k)
            p_y.push(CondImageDecoder::build(
                store,
                &format!("{scope}.p_y{}", k + 1),
                latent,
                cc,
                (ch, cw),
                fc,
                (fh, fw),
                components,
                cfg,
                rng,
            )?);
        }
        let prior = Prior::build(store, &format!("{scope}.prior"), latent, prior, rng)?;
        Ok(Self {
            transforms,
            level_shapes,
            q_u,
            q_z,
            p_y1,
            p_z,
            p_y,
            prior,
            latent,
            components,
        })
    }

    /// Number of self-supervised levels K.
    pub fn num_levels(&self) -> usize {
        self.transforms.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        *self.level_shapes.last().unwrap()
    }

    /// y_1 .. y_{K+1}=x as integer tensors, coarsest first.
    pub fn levels(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (c, h, w) = self.input_shape();
        if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "expected [B,{c},{h},{w}] input, got {:?}",
                x.shape()
            )));
        }
        transform_levels(x, &self.transforms)
    }

    /// Noise draws for one evaluation: first the top latent, then each
    /// level latent in order — the contract every shared-randomness
    /// identity in the tests builds on.
    pub fn draw_eps<R: Rng>(&self, batch: usize, rng: &mut R) -> (Tensor, Vec<Tensor>) {
        let (c, h, w) = self.latent;
        let eps_u = dist::sample_standard_normal(rng, &[batch, c, h, w]);
        let eps_z = (0..self.num_levels())
            .map(|_| dist::sample_standard_normal(rng, &[batch, c, h, w]))
            .collect();
        (eps_u, eps_z)
    }

    /// Per-sample importance log-weight of the full hierarchy:
    /// log p(x, y, z, u) - log q(z, u | x) at the reparameterized draws.
    pub fn log_weight_with_eps(
        &self,
        bind: &Binding,
        x: &Tensor,
        eps_u: &Tensor,
        eps_z: &[Tensor],
    ) -> Result<Tensor> {
        if eps_z.len() != self.num_levels() {
            return Err(Error::shape(format!(
                "{} noise tensors for {} levels",
                eps_z.len(),
                self.num_levels()
            )));
        }
        let levels = self.levels(x)?;
        let y1n = normalize_pixels(&levels[0]);
        let q_u = self.q_u.apply(bind, &y1n)?;
        let u = dist::reparameterize(&q_u, eps_u)?;
        let mut lw = dist::dlogistic_log_prob(&self.p_y1.apply(bind, &u)?, &levels[0])?
            .add(&self.prior.log_prob(bind, &u)?)?
            .sub(&dist::gaussian_log_prob(&q_u, &u)?)?;
        let mut prev = u;
        for k in 1..=self.num_levels() {
            let fine_n = normalize_pixels(&levels[k]);
            let coarse_n = normalize_pixels(&levels[k - 1]);
            let q_zk = self.q_z[k - 1].apply(bind, &fine_n)?;
            let p_zk = self.p_z[k - 1].apply(bind, &coarse_n, Some(&prev))?;
            let zk = dist::reparameterize(&q_zk, &eps_z[k - 1])?;
            lw = lw
                .add(&dist::gaussian_log_prob(&p_zk, &zk)?)?
                .sub(&dist::gaussian_log_prob(&q_zk, &zk)?)?
                .add(&dist::dlogistic_log_prob(
                    &self.p_y[k - 1].apply(bind, &zk, &coarse_n)?,
                    &levels[k],
                )?)?;
            prev = zk;
        }
        Ok(lw)
    }

    /// Data-dependent init in generative order on one batch: encoders see
    /// their conditioning levels, decoders see posterior latent draws.
    pub fn ddi<R: Rng>(&self, store: &mut ParamStore, x: &Tensor, rng: &mut R) -> Result<()> {
        let levels = self.levels(x)?;
        let y1n = normalize_pixels(&levels[0]);
        let q_u = self.q_u.ddi(store, &y1n)?;
        let eps_u = dist::sample_standard_normal(rng, q_u.mu.shape());
        let u = dist::reparameterize(&q_u, &eps_u)?;
        self.p_y1.ddi(store, &u)?;
        let mut prev = u;
        for k in 1..=self.num_levels() {
            let fine_n = normalize_pixels(&levels[k]);
            let coarse_n = normalize_pixels(&levels[k - 1]);
            let q_zk = self.q_z[k - 1].ddi(store, &fine_n)?;
            self.p_z[k - 1].ddi(store, &coarse_n, Some(&prev))?;
            let eps = dist::sample_standard_normal(rng, q_zk.mu.shape());
            let zk = dist::reparameterize(&q_zk, &eps)?;
            self.p_y[k - 1].ddi(store, &zk, &coarse_n)?;
            prev = zk;
        }
        Ok(())
    }

    /// Posterior over the top latent given a data batch (through y_1).
    pub fn posterior_u(&self, bind: &Binding, x: &Tensor) -> Result<DiagGaussianParams> {
        let levels = self.levels(x)?;
        self.q_u.apply(bind, &normalize_pixels(&levels[0]))
    }
}

/// Either model kind, for the drivers that work with both.
pub enum Model {
    Vae(VaeModel),
    SelfVae(SelfVaeModel),
}

impl Model {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self {
            Model::Vae(m) => m.input,
            Model::SelfVae(m) => m.input_shape(),
        }
    }

    /// Pixels per sample, the D in bits-per-dimension.
    pub fn data_dim(&self) -> usize {
        let (c, h, w) = self.input_shape();
        c * h * w
    }

    /// One per-sample importance log-weight with noise drawn from `rng`
    /// in the documented order.
    pub fn log_weight<R: Rng>(&self, bind: &Binding, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let b = x.shape()[0];
        match self {
            Model::Vae(m) => {
                let eps = m.draw_eps(b, rng);
                m.log_weight_with_eps(bind, x, &eps)
            }
            Model::SelfVae(m) => {
                let (eps_u, eps_z) = m.draw_eps(b, rng);
                m.log_weight_with_eps(bind, x, &eps_u, &eps_z)
            }
        }
    }

    pub fn ddi<R: Rng>(&self, store: &mut ParamStore, x: &Tensor, rng: &mut R) -> Result<()> {
        match self {
            Model::Vae(m) => m.ddi(store, x, rng),
            Model::SelfVae(m) => m.ddi(store, x, rng),
        }
    }
}

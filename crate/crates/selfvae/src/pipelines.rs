//! Sampling and reconstruction pipelines over trained models: the five
//! generation/reconstruction schemes, latent interpolation, z-resampling
//! with a kept u, and importance-weighted likelihood evaluation.
//!
//! Every pipeline is a pure function of (parameters, input, seed); the
//! `deterministic` flag replaces every Gaussian draw with its mean and
//! every pixel draw with the mixture mode, consuming no randomness.

use crate::dist::{self, DiagGaussianParams, MixtureLogisticParams};
use crate::error::{Error, Result};
use crate::model::{normalize_pixels, Model, SelfVaeModel};
use crate::store::Binding;
use crate::tensor::Tensor;
use crate::transforms::ImageU8;
use crate::SeedRng;
use rand::{Rng, SeedableRng};

/// Which variables a reconstruction run infers from the input (and must
/// therefore transmit) versus samples from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    /// Nothing inferred; pure ancestral sampling.
    Generation,
    /// Ground-truth y held fixed, all level latents inferred from x.
    ConditionalGeneration,
    /// Ground-truth y held fixed, only u inferred; latents sampled from
    /// their conditional priors.
    ConditionalReconstruction,
    /// Only u inferred; y and all latents sampled downstream.
    Reconstruction1,
    /// u and all level latents inferred; y sampled.
    Reconstruction2,
}

impl ReconMode {
    pub fn all() -> [ReconMode; 5] {
        [
            ReconMode::Generation,
            ReconMode::ConditionalGeneration,
            ReconMode::ConditionalReconstruction,
            ReconMode::Reconstruction1,
            ReconMode::Reconstruction2,
        ]
    }

    /// Raw storage of the inferred variables, independent of pixel
    /// content: the finest y as 8-bit pixels (coarser levels are its
    /// deterministic transforms), latents as 32-bit values each.
    pub fn sent_bytes(&self, model: &SelfVaeModel) -> u64 {
        let k = model.num_levels();
        let (yc, yh, yw) = model.level_shapes[k - 1];
        let y_bytes = (yc * yh * yw) as u64;
        let latent_bytes = 4 * model.prior.dim() as u64;
        match self {
            ReconMode::Generation => 0,
            ReconMode::ConditionalGeneration => y_bytes + latent_bytes * k as u64,
            ReconMode::ConditionalReconstruction => y_bytes + latent_bytes,
            ReconMode::Reconstruction1 => latent_bytes,
            ReconMode::Reconstruction2 => latent_bytes * (1 + k as u64),
        }
    }
}

/// nats -> bits per dimension.
pub fn nats_to_bpd(nats: f64, dim: usize) -> f64 {
    nats / (dim as f64 * std::f64::consts::LN_2)
}

fn sample_gaussian<R: Rng>(
    params: &DiagGaussianParams,
    rng: &mut R,
    deterministic: bool,
) -> Result<Tensor> {
    if deterministic {
        return Ok(params.mu.detach());
    }
    let eps = dist::sample_standard_normal(rng, params.mu.shape());
    dist::reparameterize(params, &eps)
}

fn sample_pixels<R: Rng>(
    params: &MixtureLogisticParams,
    rng: &mut R,
    deterministic: bool,
) -> Tensor {
    if deterministic {
        dist::dlogistic_mode(params)
    } else {
        dist::dlogistic_sample(params, rng)
    }
}

fn batch_to_images(t: &Tensor) -> Result<Vec<ImageU8>> {
    let s = t.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [B,C,H,W], got {s:?}")));
    }
    (0..s[0])
        .map(|b| {
            ImageU8::from_tensor_chw(&t.slice_axis(0, b, 1)?.reshape(&[s[1], s[2], s[3]])?)
        })
        .collect()
}

/// The generative chain below a given top latent: y_1 from u, then per
/// level z_k from its conditional prior and y_{k+1} from the decoder.
/// Returns the finest level (integer pixels).
fn decode_from_u<R: Rng>(
    model: &SelfVaeModel,
    bind: &Binding,
    u: &Tensor,
    rng: &mut R,
    deterministic: bool,
) -> Result<Tensor> {
    let b = u.shape()[0];
    let (lc, lh, lw) = model.latent;
    let u = u.reshape(&[b, lc, lh, lw])?;
    let mut y = sample_pixels(&model.p_y1.apply(bind, &u)?, rng, deterministic);
    let mut prev = u;
    for k in 1..=model.num_levels() {
        let yn = normalize_pixels(&y);
        let p_z = model.p_z[k - 1].apply(bind, &yn, Some(&prev))?;
        let z = sample_gaussian(&p_z, rng, deterministic)?;
        y = sample_pixels(&model.p_y[k - 1].apply(bind, &z, &yn)?, rng, deterministic);
        prev = z;
    }
    Ok(y)
}

/// Ancestral sampling of `n` images from either model kind.
pub fn generate<R: Rng>(
    model: &Model,
    bind: &Binding,
    n: usize,
    rng: &mut R,
    deterministic: bool,
) -> Result<Vec<ImageU8>> {
    let x = match model {
        Model::Vae(m) => {
            let (lc, lh, lw) = m.latent;
            let z = m.prior.sample(bind, rng, n)?.reshape(&[n, lc, lh, lw])?;
            sample_pixels(&m.decoder.apply(bind, &z)?, rng, deterministic)
        }
        Model::SelfVae(m) => {
            let u = m.prior.sample(bind, rng, n)?;
            decode_from_u(m, bind, &u, rng, deterministic)?
        }
    };
    batch_to_images(&x)
}

/// Run one reconstruction scheme on a single image, returning the output
/// and the bytes that would have to be transmitted for it.
pub fn reconstruct<R: Rng>(
    model: &SelfVaeModel,
    bind: &Binding,
    x_star: &ImageU8,
    mode: ReconMode,
    rng: &mut R,
    deterministic: bool,
) -> Result<(ImageU8, u64)> {
    let (c, h, w) = model.input_shape();
    let x = x_star.to_tensor_chw().reshape(&[1, c, h, w])?;
    let levels = model.levels(&x)?;
    let k_levels = model.num_levels();

    let out = match mode {
        ReconMode::Generation => {
            let u = model.prior.sample(bind, rng, 1)?;
            decode_from_u(model, bind, &u, rng, deterministic)?
        }
        ReconMode::ConditionalGeneration => {
            // every level latent inferred from its ground-truth evidence;
            // only the finest decode is generative
            let mut z = None;
            for k in 1..=k_levels {
                let q = model.q_z[k - 1].apply(bind, &normalize_pixels(&levels[k]))?;
                z = Some(sample_gaussian(&q, rng, deterministic)?);
            }
            let yn = normalize_pixels(&levels[k_levels - 1]);
            let p = model.p_y[k_levels - 1].apply(bind, &z.expect("K >= 1"), &yn)?;
            sample_pixels(&p, rng, deterministic)
        }
        ReconMode::ConditionalReconstruction => {
            // u inferred; latents walk the conditional priors against the
            // ground-truth y chain; only the finest decode emits pixels
            let q_u = model.q_u.apply(bind, &normalize_pixels(&levels[0]))?;
            let mut prev = sample_gaussian(&q_u, rng, deterministic)?;
            for k in 1..=k_levels {
                let yn = normalize_pixels(&levels[k - 1]);
                let p_z = model.p_z[k - 1].apply(bind, &yn, Some(&prev))?;
                prev = sample_gaussian(&p_z, rng, deterministic)?;
            }
            let yn = normalize_pixels(&levels[k_levels - 1]);
            sample_pixels(&model.p_y[k_levels - 1].apply(bind, &prev, &yn)?, rng, deterministic)
        }
        ReconMode::Reconstruction1 => {
            let q_u = model.q_u.apply(bind, &normalize_pixels(&levels[0]))?;
            let u = sample_gaussian(&q_u, rng, deterministic)?;
            decode_from_u(model, bind, &u, rng, deterministic)?
        }
        ReconMode::Reconstruction2 => {
            // u and every z inferred from ground truth, y regenerated
            let q_u = model.q_u.apply(bind, &normalize_pixels(&levels[0]))?;
            let u = sample_gaussian(&q_u, rng, deterministic)?;
            let mut y = sample_pixels(&model.p_y1.apply(bind, &u)?, rng, deterministic);
            for k in 1..=k_levels {
                let q = model.q_z[k - 1].apply(bind, &normalize_pixels(&levels[k]))?;
                let z = sample_gaussian(&q, rng, deterministic)?;
                let yn = normalize_pixels(&y);
                y = sample_pixels(&model.p_y[k - 1].apply(bind, &z, &yn)?, rng, deterministic);
            }
            y
        }
    };
    let img = batch_to_images(&out)?.remove(0);
    Ok((img, mode.sent_bytes(model)))
}

/// The conditional-generation scheme as a standalone entry point.
pub fn conditional_generation<R: Rng>(
    model: &SelfVaeModel,
    bind: &Binding,
    x_star: &ImageU8,
    rng: &mut R,
    deterministic: bool,
) -> Result<ImageU8> {
    Ok(reconstruct(model, bind, x_star, ReconMode::ConditionalGeneration, rng, deterministic)?.0)
}

/// Interpolation frames plus the top-latent path they decode.
pub struct Interpolation {
    pub frames: Vec<ImageU8>,
    /// u at every frame, [1, dim] each.
    pub latents: Vec<Tensor>,
}

/// Interpolate between two images through the top latent: u is inferred
/// at both ends, mapped to the flow's base space, linearly mixed, mapped
/// back, and decoded. Endpoints use the inferred u directly (no flow
/// round trip), so they reproduce the u-only reconstructions bit-exactly.
///
/// Every frame decodes with a fresh rng seeded from `frame_seed`, so the
/// chain below u consumes identical randomness across frames.
pub fn interpolate_u(
    model: &SelfVaeModel,
    bind: &Binding,
    x_a: &ImageU8,
    x_b: &ImageU8,
    steps: usize,
    frame_seed: u64,
    deterministic: bool,
) -> Result<Interpolation> {
    if steps < 2 {
        return Err(Error::domain(format!("need at least 2 steps, got {steps}")));
    }
    let (c, h, w) = model.input_shape();
    let ta = x_a.to_tensor_chw().reshape(&[1, c, h, w])?;
    let tb = x_b.to_tensor_chw().reshape(&[1, c, h, w])?;
    let q_a = model.posterior_u(bind, &ta)?;
    let q_b = model.posterior_u(bind, &tb)?;

    // the endpoint u draws reuse the same per-frame noise
    let mut eps_rng = SeedRng::seed_from_u64(frame_seed);
    let u_a = sample_gaussian(&q_a, &mut eps_rng, deterministic)?;
    let mut eps_rng = SeedRng::seed_from_u64(frame_seed);
    let u_b = sample_gaussian(&q_b, &mut eps_rng, deterministic)?;
    let v_a = model.prior.to_base(bind, &u_a)?;
    let v_b = model.prior.to_base(bind, &u_b)?;

    let dim = model.prior.dim();
    let mut frames = Vec::with_capacity(steps);
    let mut latents = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut rng = SeedRng::seed_from_u64(frame_seed);
        // consume the u draw so the decode stream matches the endpoints'
        let u_t = if t == 0 {
            sample_gaussian(&q_a, &mut rng, deterministic)?
        } else if t == steps - 1 {
            sample_gaussian(&q_b, &mut rng, deterministic)?
        } else {
            let _ = sample_gaussian(&q_a, &mut rng, deterministic)?;
            let alpha = t as f64 / (steps - 1) as f64;
            let v = v_a.scale(1.0 - alpha).add(&v_b.scale(alpha))?;
            model.prior.from_base(bind, &v)?
        };
        let u_t = u_t.reshape(&[1, dim])?;
        let x = decode_from_u(model, bind, &u_t, &mut rng, deterministic)?;
        frames.push(batch_to_images(&x)?.remove(0));
        latents.push(u_t.detach());
    }
    Ok(Interpolation { frames, latents })
}

/// Keep the inferred u, resample everything below it `n` times.
pub fn resample_z_keep_u<R: Rng>(
    model: &SelfVaeModel,
    bind: &Binding,
    x_star: &ImageU8,
    n: usize,
    rng: &mut R,
    deterministic: bool,
) -> Result<Vec<ImageU8>> {
    let (c, h, w) = model.input_shape();
    let x = x_star.to_tensor_chw().reshape(&[1, c, h, w])?;
    let q_u = model.posterior_u(bind, &x)?;
    let u = sample_gaussian(&q_u, rng, deterministic)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = decode_from_u(model, bind, &u, rng, deterministic)?;
        out.push(batch_to_images(&x)?.remove(0));
    }
    Ok(out)
}

/// Importance-weighted negative log-likelihood in bits per dimension:
/// per sample, logsumexp of `num_samples` log-weights minus log S.
pub fn iwae_nll<R: Rng>(
    model: &Model,
    bind: &Binding,
    x: &Tensor,
    num_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::domain("need at least one importance sample"));
    }
    let b = x.shape()[0];
    let mut weights = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        weights.push(model.log_weight(bind, x, rng)?);
    }
    let refs: Vec<&Tensor> = weights.iter().collect();
    let bound = Tensor::concat(&refs, 0)?
        .reshape(&[num_samples, b])?
        .permute(&[1, 0])?
        .logsumexp_last_axis()
        .add_scalar(-(num_samples as f64).ln())
        .mean_all()
        .item();
    Ok(nats_to_bpd(-bound, model.data_dim()))
}

/// Tile images (all the same size) into a `cols`-wide grid for PNG dumps.
pub fn image_grid(images: &[ImageU8], cols: usize) -> Result<ImageU8> {
    if images.is_empty() || cols == 0 {
        return Err(Error::domain("grid needs images and a positive width"));
    }
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape("grid images must share a shape"));
        }
    }
    let rows = images.len().div_ceil(cols);
    let mut grid = ImageU8::constant(rows * h, cols * w, c, 0);
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    grid.pixels[((r0 + y) * cols * w + c0 + x) * c + ch] = img.get(y, x, ch);
                }
            }
        }
    }
    Ok(grid)
}

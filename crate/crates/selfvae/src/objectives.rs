//! Training objectives: the VAE bound with a learned prior, the two-level
//! self-supervised bound, and its K-level generalization.
//!
//! Every objective returns an [`ElboTerms`] decomposition whose `total`
//! is composed from the very term tensors it reports, so the sign
//! identity `total = re_x + sum(re_y) - sum(kl_z) - kl_u` holds to
//! floating-point associativity. All terms are per-sample batch means in
//! nats; `total` is the lower bound L(x), maximized during training.
//!
//! The latent-KL sum includes the k = 1 term under the z_0 = u
//! convention, so the K-level bound at K = 1 is the two-level bound by
//! construction. Expectations over the deterministic q(y|x) collapse to
//! evaluation at y = d(x), contributing zero entropy.

use crate::dist;
use crate::error::{Error, Result};
use crate::model::{normalize_pixels, SelfVaeModel, VaeModel};
use crate::store::Binding;
use crate::tensor::Tensor;
use rand::Rng;

/// Named decomposition of one bound evaluation. Reconstruction terms are
/// log-likelihoods (bigger is better); KL terms enter `total` negated.
pub struct ElboTerms {
    /// E[log p(x | parents)] — the finest-level reconstruction.
    pub re_x: Tensor,
    /// E[log p(y_k | parents)], coarsest first; K entries, the first
    /// being the top-level p(y_1 | u).
    pub re_y: Vec<Tensor>,
    /// Latent KLs per level, k = 1..K (analytic for Gaussian pairs, MC
    /// for the single-latent VAE where the prior is a flow).
    pub kl_z: Vec<Tensor>,
    /// KL(q(u|y_1) || p(u)), single-sample MC against the learned prior.
    pub kl_u: Tensor,
    /// re_x + sum(re_y) - sum(kl_z) - kl_u.
    pub total: Tensor,
}

/// Plain-number snapshot of [`ElboTerms`] for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNumbers {
    pub re_x: f64,
    pub re_y: Vec<f64>,
    pub kl_z: Vec<f64>,
    pub kl_u: f64,
    pub total: f64,
}

impl ElboTerms {
    pub fn numbers(&self) -> ElboNumbers {
        ElboNumbers {
            re_x: self.re_x.item(),
            re_y: self.re_y.iter().map(Tensor::item).collect(),
            kl_z: self.kl_z.iter().map(Tensor::item).collect(),
            kl_u: self.kl_u.item(),
            total: self.total.item(),
        }
    }
}

fn compose(re_x: Tensor, re_y: Vec<Tensor>, kl_z: Vec<Tensor>, kl_u: Tensor) -> Result<ElboTerms> {
    let mut total = re_x.clone();
    for t in &re_y {
        total = total.add(t)?;
    }
    for t in &kl_z {
        total = total.sub(t)?;
    }
    let total = total.sub(&kl_u)?;
    Ok(ElboTerms {
        re_x,
        re_y,
        kl_z,
        kl_u,
        total,
    })
}

/// VAE bound with the learned prior: a single-sample estimate of
/// E_q[log p(x|z)] minus the MC KL term log q(z|x) - log p(z). The MC KL
/// can be negative on any single draw; only its expectation is a KL.
pub fn vae_elbo_with_eps(
    model: &VaeModel,
    bind: &Binding,
    x: &Tensor,
    eps: &Tensor,
) -> Result<ElboTerms> {
    let q = model.encoder.apply(bind, &normalize_pixels(x))?;
    let z = dist::reparameterize(&q, eps)?;
    let re = dist::dlogistic_log_prob(&model.decoder.apply(bind, &z)?, x)?;
    let log_q = dist::gaussian_log_prob(&q, &z)?;
    let log_p = model.prior.log_prob(bind, &z)?;
    let kl = log_q.sub(&log_p)?.mean_all();
    compose(re.mean_all(), Vec::new(), vec![kl], Tensor::scalar(0.0))
}

pub fn vae_elbo<R: Rng>(
    model: &VaeModel,
    bind: &Binding,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboTerms> {
    let eps = model.draw_eps(x.shape()[0], rng);
    vae_elbo_with_eps(model, bind, x, &eps)
}

/// The K-level self-supervised bound. Latent KLs are analytic (both ends
/// Gaussian); the top KL is single-sample MC because the flow prior has
/// no closed form. Noise order: `eps_u`, then `eps_z[0..K]`.
pub fn hierarchical_elbo_with_eps(
    model: &SelfVaeModel,
    bind: &Binding,
    x: &Tensor,
    eps_u: &Tensor,
    eps_z: &[Tensor],
) -> Result<ElboTerms> {
    let k_levels = model.num_levels();
    if eps_z.len() != k_levels {
        return Err(Error::shape(format!(
            "{} noise tensors for {} levels",
            eps_z.len(),
            k_levels
        )));
    }
    let levels = model.levels(x)?;
    let y1n = normalize_pixels(&levels[0]);
    let q_u = model.q_u.apply(bind, &y1n)?;
    let u = dist::reparameterize(&q_u, eps_u)?;
    let log_qu = dist::gaussian_log_prob(&q_u, &u)?;
    let log_pu = model.prior.log_prob(bind, &u)?;
    let kl_u = log_qu.sub(&log_pu)?.mean_all();
    let re_y1 = dist::dlogistic_log_prob(&model.p_y1.apply(bind, &u)?, &levels[0])?.mean_all();

    let mut re_y = vec![re_y1];
    let mut kl_z = Vec::with_capacity(k_levels);
    let mut re_x = None;
    let mut prev = u;
    for k in 1..=k_levels {
        let fine_n = normalize_pixels(&levels[k]);
        let coarse_n = normalize_pixels(&levels[k - 1]);
        let q_zk = model.q_z[k - 1].apply(bind, &fine_n)?;
        let p_zk = model.p_z[k - 1].apply(bind, &coarse_n, Some(&prev))?;
        kl_z.push(dist::gaussian_kl(&q_zk, &p_zk)?.mean_all());
        let zk = dist::reparameterize(&q_zk, &eps_z[k - 1])?;
        let re = dist::dlogistic_log_prob(&model.p_y[k - 1].apply(bind, &zk, &coarse_n)?, &levels[k])?
            .mean_all();
        if k == k_levels {
            re_x = Some(re);
        } else {
            re_y.push(re);
        }
        prev = zk;
    }
    compose(re_x.expect("at least one level"), re_y, kl_z, kl_u)
}

pub fn hierarchical_elbo<R: Rng>(
    model: &SelfVaeModel,
    bind: &Binding,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboTerms> {
    let (eps_u, eps_z) = model.draw_eps(x.shape()[0], rng);
    hierarchical_elbo_with_eps(model, bind, x, &eps_u, &eps_z)
}

/// The two-level bound: the K-level bound specialized to exactly one
/// transform, which it reduces to by construction.
pub fn selfvae_elbo_with_eps(
    model: &SelfVaeModel,
    bind: &Binding,
    x: &Tensor,
    eps_u: &Tensor,
    eps_z: &Tensor,
) -> Result<ElboTerms> {
    if model.num_levels() != 1 {
        return Err(Error::contract(format!(
            "two-level bound needs exactly one transform, model has {}",
            model.num_levels()
        )));
    }
    hierarchical_elbo_with_eps(model, bind, x, eps_u, std::slice::from_ref(eps_z))
}

pub fn selfvae_elbo<R: Rng>(
    model: &SelfVaeModel,
    bind: &Binding,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboTerms> {
    let (eps_u, eps_z) = model.draw_eps(x.shape()[0], rng);
    selfvae_elbo_with_eps(model, bind, x, &eps_u, &eps_z[0])
}

/// Minimization target: the negated per-sample-mean bound.
pub fn loss_for_optimizer(terms: &ElboTerms) -> Tensor {
    terms.total.neg()
}

/// The objective matching the model kind.
pub fn model_elbo<R: Rng>(
    model: &crate::model::Model,
    bind: &Binding,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboTerms> {
    match model {
        crate::model::Model::Vae(m) => vae_elbo(m, bind, x, rng),
        crate::model::Model::SelfVae(m) => hierarchical_elbo(m, bind, x, rng),
    }
}

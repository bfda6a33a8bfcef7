//! Acceptance gate: one test per release criterion. Each test prints a
//! single `criterion NN ... PASS` line with the measured quantity and the
//! pinned tolerance once its assertions hold, so a full run reads as a
//! checklist. Tolerances are hard-coded on purpose — do not relax them.

use rand::{Rng, SeedableRng};
use selfvae::checkpoint::Checkpoint;
use selfvae::config::{DataSource, ModelKind, RunConfig};
use selfvae::dist::{self, MixtureLogisticParams};
use selfvae::flow::FlowStack;
use selfvae::model::{Model, Prior, PriorKind, PriorSpec, SelfVaeModel, VaeModel};
use selfvae::nets::NetConfig;
use selfvae::objectives::{
    hierarchical_elbo_with_eps, selfvae_elbo_with_eps, vae_elbo, vae_elbo_with_eps,
};
use selfvae::oracle::lu_log_abs_det;
use selfvae::pipelines::{iwae_nll, nats_to_bpd};
use selfvae::store::{Binding, ParamStore};
use selfvae::tensor::{Tape, Tensor};
use selfvae::train::{self, dataset_bpd, load_dataset, EpochOutcome, Trainer};
use selfvae::transforms::{self, ImageU8, TransformSpec};
use selfvae::{Result, SeedRng};
use std::time::Instant;

// ---------------------------------------------------------------- shared

fn tiny_net(latent: (usize, usize, usize)) -> NetConfig {
    NetConfig {
        growth_rate: 2,
        blocks_per_stage: 1,
        stages: 1,
        latent_shape: latent,
        base_width: 2,
        attention_reduction: 2,
    }
}

fn flow_spec(layers: usize, hidden: usize) -> PriorSpec {
    PriorSpec {
        kind: PriorKind::RealNvp,
        flow_layers: layers,
        flow_hidden: hidden,
        mog_components: 8,
    }
}

/// Deterministic integer-pixel batch, values cycling through 0..=255.
fn ramp_batch(b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let n = b * c * h * w;
    Tensor::from_vec(
        (0..n).map(|i| ((i * 73) % 256) as f64).collect(),
        &[b, c, h, w],
    )
}

/// Add seeded Gaussian noise to every parameter (turns identity-initialized
/// flows into non-trivial maps without leaving f64-friendly ranges).
fn perturb_params(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = SeedRng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).iter_mut() {
            *v += scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Worst relative disagreement between the reverse-mode gradient of
/// `loss` and fourth-order central differences, across every parameter
/// scalar in the store.
///
/// The objective is locally very sharp along some weight-norm direction
/// coordinates (slopes up to ~1e6 nats per unit), so no single step size
/// fits all coordinates: a large step leaves the linear regime there,
/// while a tiny step drowns flat coordinates in roundoff. Each
/// coordinate therefore walks down a ladder of step sizes and keeps its
/// best agreement; a real gradient bug disagrees at every step size. The
/// noise floor in the denominator is the probe's resolution — below it
/// both values are indistinguishable from zero at working precision.
fn max_grad_fd_error<F>(store: &mut ParamStore, loss: F) -> f64
where
    F: Fn(&Binding) -> Result<Tensor>,
{
    const FD_NOISE_FLOOR: f64 = 1e-5;
    const STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
    let tape = Tape::new();
    let bind = store.bind(&tape);
    let scalar = loss(&bind).expect("objective evaluates");
    let grads = scalar.backward().expect("objective differentiates");
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| match grads.grad(bind.get(id)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.value(id).len()],
        })
        .collect();
    drop(bind);

    let mut worst = 0.0f64;
    for (&id, grad) in ids.iter().zip(&analytic) {
        for (j, &a) in grad.iter().enumerate() {
            let orig = store.value(id)[j];
            let mut best = f64::INFINITY;
            for eps in STEPS {
                let mut eval_at = |v: f64| -> f64 {
                    store.value_mut(id)[j] = v;
                    loss(&store.bind_const()).expect("objective evaluates").item()
                };
                let f1 = eval_at(orig + eps);
                let f2 = eval_at(orig - eps);
                let f3 = eval_at(orig + 2.0 * eps);
                let f4 = eval_at(orig - 2.0 * eps);
                store.value_mut(id)[j] = orig;
                let numeric = (8.0 * (f1 - f2) - (f3 - f4)) / (12.0 * eps);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + FD_NOISE_FLOOR);
                best = best.min(rel);
                if best < 1e-4 {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    worst
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ------------------------------------------------------------- criteria

/// Reverse-mode gradients of all three objectives on a 4x4-image,
/// growth-rate-2 model match central finite differences, max relative
/// error < 1e-3, in under 2 minutes.
#[test]
fn c01_objective_gradients_match_finite_differences() {
    // The check runs at the fresh random init: a generic smooth point where
    // every gain is 1. Data-dependent init from a 2-image batch is skipped on
    // purpose — its near-degenerate gate statistics produce huge 1/std gains
    // that drive sigmoids into exact-f64 saturation, where the realized
    // function is locally flat and central differences cannot see the true
    // derivative.
    let started = Instant::now();
    let batch = 2;
    let x = ramp_batch(batch, 3, 4, 4);

    let mut rng = SeedRng::seed_from_u64(101);
    let mut store = ParamStore::new();
    let vae = VaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    let eps_v = vae.draw_eps(batch, &mut rng);
    let err_vae = max_grad_fd_error(
        &mut store,
        |b| vae_elbo_with_eps(&vae, b, &x, &eps_v).map(|t| t.total),
    );

    let mut store = ParamStore::new();
    let sv1 = SelfVaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        vec![TransformSpec::Downscale { factor: 2 }],
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    let (eu1, ez1) = sv1.draw_eps(batch, &mut rng);
    let err_selfvae = max_grad_fd_error(
        &mut store,
        |b| selfvae_elbo_with_eps(&sv1, b, &x, &eu1, &ez1[0]).map(|t| t.total),
    );

    let mut store = ParamStore::new();
    let sv2 = SelfVaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        vec![
            TransformSpec::Downscale { factor: 2 },
            TransformSpec::Downscale { factor: 2 },
        ],
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    let (eu2, ez2) = sv2.draw_eps(batch, &mut rng);
    let err_hier = max_grad_fd_error(
        &mut store,
        |b| hierarchical_elbo_with_eps(&sv2, b, &x, &eu2, &ez2).map(|t| t.total),
    );

    let elapsed = started.elapsed();
    for (name, err) in [("vae", err_vae), ("selfvae", err_selfvae), ("hierarchical", err_hier)] {
        assert!(err < 1e-3, "{name} objective: max rel gradient error {err:.3e} >= 1e-3");
    }
    assert!(elapsed.as_secs() < 120, "gradient check took {elapsed:?} >= 2 min");
    println!(
        "criterion 01 gradient correctness: PASS — max rel err vae {err_vae:.2e}, \
         selfvae {err_selfvae:.2e}, hierarchical {err_hier:.2e} (< 1e-3) in {elapsed:.2?}"
    );
}

/// Flow exactness: forward-then-inverse round trip within 1e-6 on 10^3
/// latents; analytic log-det matches a dense autodiff Jacobian within
/// 1e-6 on dims 2..=8.
#[test]
fn c02_flow_round_trip_and_log_det_are_exact() {
    // round trip on a non-trivial (perturbed) 8-dim stack
    let mut store = ParamStore::new();
    let mut rng = SeedRng::seed_from_u64(202);
    let flow = FlowStack::build(&mut store, "flow", &[8], 4, 16, &mut rng).unwrap();
    perturb_params(&mut store, 203, 0.3);
    let bind = store.bind_const();
    let v = dist::sample_standard_normal(&mut rng, &[1000, 8]);
    let (z, ld_fwd) = flow.forward(&bind, &v).unwrap();
    let (v_back, ld_inv) = flow.inverse(&bind, &z).unwrap();
    let round_trip = v_back
        .sub(&v)
        .unwrap()
        .data()
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(round_trip < 1e-6, "round-trip error {round_trip:.3e} >= 1e-6");
    let det_cancel = ld_fwd
        .add(&ld_inv)
        .unwrap()
        .data()
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(det_cancel < 1e-6, "fwd+inv log-det {det_cancel:.3e} >= 1e-6");

    // analytic log-det vs LU of the dense autodiff Jacobian
    let mut worst_det = 0.0f64;
    for dim in 2..=8usize {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::seed_from_u64(210 + dim as u64);
        let flow = FlowStack::build(&mut store, "flow", &[dim], 3, 8, &mut rng).unwrap();
        perturb_params(&mut store, 220 + dim as u64, 0.25);
        let bind = store.bind_const();
        let v0: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let analytic = flow
            .forward(&bind, &Tensor::from_vec(v0.clone(), &[1, dim]))
            .unwrap()
            .1
            .item();
        let mut jac = vec![0.0f64; dim * dim];
        for i in 0..dim {
            let tape = Tape::new();
            let v = tape.leaf(std::sync::Arc::new(v0.clone()), vec![1, dim]);
            let (z, _) = flow.forward(&bind, &v).unwrap();
            let grads = z.slice_axis(1, i, 1).unwrap().sum_all().backward().unwrap();
            jac[i * dim..(i + 1) * dim]
                .copy_from_slice(grads.grad(&v).expect("flow input gradient"));
        }
        let dense = lu_log_abs_det(&jac, dim);
        worst_det = worst_det.max((dense - analytic).abs());
    }
    assert!(worst_det < 1e-6, "log-det vs dense Jacobian {worst_det:.3e} >= 1e-6");
    println!(
        "criterion 02 flow exactness: PASS — round trip {round_trip:.2e}, \
         log-det vs dense Jacobian {worst_det:.2e} (< 1e-6)"
    );
}

/// Likelihood normalization: the discretized-logistic mixture sums to 1
/// over its 256 bins within 1e-6 for 10^3 random parameter draws, and a
/// 2-d flow prior integrates to 1 within 1e-2 by grid quadrature.
#[test]
fn c03_densities_are_normalized() {
    // mixture normalization: one pixel, all 256 values evaluated as a batch
    let comps = 3;
    let levels = 256usize;
    let mut rng = SeedRng::seed_from_u64(303);
    let tile = |row: &[f64]| {
        Tensor::from_vec(
            (0..levels).flat_map(|_| row.iter().copied()).collect(),
            &[levels, comps],
        )
    };
    let x = Tensor::from_vec((0..levels).map(|v| v as f64).collect(), &[levels]);
    let mut worst_mass = 0.0f64;
    for _ in 0..1000 {
        let pi: Vec<f64> = (0..comps)
            .map(|_| 1.5 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mu: Vec<f64> = (0..comps).map(|_| rng.gen_range(-1.1..=1.1)).collect();
        let ls: Vec<f64> = (0..comps).map(|_| rng.gen_range(-6.5..=1.0)).collect();
        let params = MixtureLogisticParams::new(tile(&pi), tile(&mu), tile(&ls)).unwrap();
        let mass = dist::dlogistic_log_prob(&params, &x).unwrap().exp().sum_all().item();
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    assert!(worst_mass < 1e-6, "mixture mass off by {worst_mass:.3e} >= 1e-6");

    // 2-d flow-prior quadrature over a box sized from prior samples
    let mut store = ParamStore::new();
    let mut rng = SeedRng::seed_from_u64(304);
    let prior = Prior::build(&mut store, "prior", (2, 1, 1), &flow_spec(4, 16), &mut rng).unwrap();
    perturb_params(&mut store, 305, 0.2);
    let bind = store.bind_const();
    let draws = prior.sample(&bind, &mut rng, 4096).unwrap();
    let radius = draws.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1.5 + 2.0;
    let n = 480usize;
    let h = 2.0 * radius / n as f64;
    let mut grid = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            grid.push(-radius + (i as f64 + 0.5) * h);
            grid.push(-radius + (j as f64 + 0.5) * h);
        }
    }
    let log_p = prior
        .log_prob(&bind, &Tensor::from_vec(grid, &[n * n, 2]))
        .unwrap();
    let integral: f64 = log_p.data().iter().map(|l| l.exp()).sum::<f64>() * h * h;
    assert!(
        (integral - 1.0).abs() < 1e-2,
        "flow density integrates to {integral} (box half-width {radius:.1})"
    );
    println!(
        "criterion 03 likelihood normalization: PASS — worst mixture mass dev {worst_mass:.2e} \
         (< 1e-6), 2-d flow integral {integral:.5} (within 1e-2)"
    );
}

/// Bound identities under shared randomness: IWAE-1 == the (fully Monte
/// Carlo) ELBO estimate < 1e-10; the K-level bound at K=1 == the
/// two-level bound < 1e-10; the two-level bound == its A+B regrouping
/// < 1e-8; the reported term decomposition recomposes < 1e-10.
#[test]
fn c04_bound_identities_hold() {
    // IWAE-1 vs the VAE bound, same seed on both sides
    let mut store = ParamStore::new();
    let mut rng = SeedRng::seed_from_u64(404);
    let vae = VaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    let x = ramp_batch(3, 3, 4, 4);
    vae.ddi(&mut store, &x, &mut rng).unwrap();
    let bind = store.bind_const();
    let elbo = vae_elbo(&vae, &bind, &x, &mut SeedRng::seed_from_u64(405))
        .unwrap()
        .numbers()
        .total;
    let dim = 3 * 4 * 4;
    let elbo_bpd = nats_to_bpd(-elbo, dim);
    let model = Model::Vae(vae);
    let iwae_bpd = iwae_nll(&model, &bind, &x, 1, &mut SeedRng::seed_from_u64(405)).unwrap();
    let d_iwae = (iwae_bpd - elbo_bpd).abs();
    assert!(d_iwae < 1e-10, "IWAE-1 vs ELBO: {d_iwae:.3e} >= 1e-10");

    // two-level vs K-level-at-1, on shared noise
    let mut store = ParamStore::new();
    let mut rng = SeedRng::seed_from_u64(406);
    let sv = SelfVaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        vec![TransformSpec::Downscale { factor: 2 }],
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    sv.ddi(&mut store, &x, &mut rng).unwrap();
    let bind = store.bind_const();
    let (eps_u, eps_z) = sv.draw_eps(3, &mut SeedRng::seed_from_u64(407));
    let two_level = selfvae_elbo_with_eps(&sv, &bind, &x, &eps_u, &eps_z[0]).unwrap();
    let k_level = hierarchical_elbo_with_eps(&sv, &bind, &x, &eps_u, &eps_z).unwrap();
    let d_k1 = (two_level.numbers().total - k_level.numbers().total).abs();
    assert!(d_k1 < 1e-10, "K=1 vs two-level: {d_k1:.3e} >= 1e-10");

    // A+B regrouping rebuilt from the raw distributions on the same draws:
    // A = E[log p(x|z,y) - KL(q(z|x) || p(z|y,u))],
    // B = E[log p(y|u) + log p(u) - log q(u|y)]
    let levels = sv.levels(&x).unwrap();
    let y1n = selfvae::model::normalize_pixels(&levels[0]);
    let xn = selfvae::model::normalize_pixels(&levels[1]);
    let q_u = sv.q_u.apply(&bind, &y1n).unwrap();
    let u = dist::reparameterize(&q_u, &eps_u).unwrap();
    let q_z = sv.q_z[0].apply(&bind, &xn).unwrap();
    let p_z = sv.p_z[0].apply(&bind, &y1n, Some(&u)).unwrap();
    let z = dist::reparameterize(&q_z, &eps_z[0]).unwrap();
    let a = dist::dlogistic_log_prob(&sv.p_y[0].apply(&bind, &z, &y1n).unwrap(), &levels[1])
        .unwrap()
        .sub(&dist::gaussian_kl(&q_z, &p_z).unwrap())
        .unwrap()
        .mean_all()
        .item();
    let b = dist::dlogistic_log_prob(&sv.p_y1.apply(&bind, &u).unwrap(), &levels[0])
        .unwrap()
        .add(&sv.prior.log_prob(&bind, &u).unwrap())
        .unwrap()
        .sub(&dist::gaussian_log_prob(&q_u, &u).unwrap())
        .unwrap()
        .mean_all()
        .item();
    let d_ab = (two_level.numbers().total - (a + b)).abs();
    assert!(d_ab < 1e-8, "two-level vs A+B: {d_ab:.3e} >= 1e-8");

    // decomposition identity of the reported terms
    let n = k_level.numbers();
    let recomposed =
        n.re_x + n.re_y.iter().sum::<f64>() - n.kl_z.iter().sum::<f64>() - n.kl_u;
    let d_terms = (n.total - recomposed).abs();
    assert!(d_terms < 1e-10, "term decomposition: {d_terms:.3e} >= 1e-10");

    println!(
        "criterion 04 bound identities: PASS — IWAE-1 vs ELBO {d_iwae:.1e} (< 1e-10), \
         K=1 vs two-level {d_k1:.1e} (< 1e-10), A+B {d_ab:.1e} (< 1e-8), \
         decomposition {d_terms:.1e} (< 1e-10)"
    );
}

/// Bound ordering: on a fixed toy model and batch, the 64-sample
/// importance bound is no looser than the 1-sample bound — mean bpd at
/// S=64 <= mean at S=1 within 3 standard errors over 20 reseeds, in
/// under 5 minutes.
#[test]
fn c05_importance_sampling_tightens_the_bound() {
    let started = Instant::now();
    let mut store = ParamStore::new();
    let mut rng = SeedRng::seed_from_u64(505);
    let sv = SelfVaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        vec![TransformSpec::Downscale { factor: 2 }],
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    let x = ramp_batch(8, 3, 4, 4);
    sv.ddi(&mut store, &x, &mut rng).unwrap();
    let model = Model::SelfVae(sv);
    let bind = store.bind_const();

    let reseeds = 20;
    let mut gaps = Vec::with_capacity(reseeds);
    for i in 0..reseeds as u64 {
        let one = iwae_nll(&model, &bind, &x, 1, &mut SeedRng::seed_from_u64(1000 + i)).unwrap();
        let many = iwae_nll(&model, &bind, &x, 64, &mut SeedRng::seed_from_u64(2000 + i)).unwrap();
        gaps.push(one - many);
    }
    let (mean_gap, se) = mean_and_se(&gaps);
    let elapsed = started.elapsed();
    assert!(
        mean_gap >= -3.0 * se,
        "S=64 looser than S=1: gap {mean_gap:.4} bpd, se {se:.4}"
    );
    assert!(elapsed.as_secs() < 300, "bound ordering took {elapsed:?} >= 5 min");
    println!(
        "criterion 05 bound ordering: PASS — bpd(S=1) - bpd(S=64) = {mean_gap:.4} ± {se:.4} \
         over {reseeds} reseeds (>= 0 within 3 SE) in {elapsed:.2?}"
    );
}

/// Training progress: a two-level selfVAE-downscale on 5000 synthetic
/// 16x16 RGB sprites reaches a training bpd at least 20% below its
/// post-init value within 20 epochs, with no non-finite values, in under
/// 30 minutes.
#[test]
fn c06_training_reduces_bpd_by_twenty_percent() {
    let started = Instant::now();
    let config = RunConfig {
        model: ModelKind::SelfVae,
        input: (3, 16, 16),
        components: 2,
        transforms: vec![TransformSpec::Downscale { factor: 2 }],
        prior: PriorKind::RealNvp,
        flow_layers: 2,
        flow_hidden: 16,
        net: tiny_net((2, 4, 4)),
        batch_size: 50,
        epochs: 20,
        seed: 0,
        data: DataSource::Sprites { count: 5000 },
        split_fraction: 0.0,
        augment: false,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(&config).unwrap();
    trainer.ensure_init().unwrap();
    let post_init = trainer.train_bpd(5000).unwrap();
    assert!(post_init.is_finite(), "post-init bpd is {post_init}");

    let mut reached = None;
    let mut last = post_init;
    for epoch in 0..20 {
        match trainer.run_epoch().unwrap() {
            EpochOutcome::Done(m) => {
                assert!(
                    m.elbo.is_finite() && m.re_x.is_finite() && m.kl_u.is_finite(),
                    "non-finite training metrics at epoch {epoch}: {m:?}"
                );
            }
            EpochOutcome::NonFinite { step } => {
                panic!("non-finite loss at optimizer step {step} in epoch {epoch}")
            }
        }
        last = trainer.train_bpd(5000).unwrap();
        assert!(last.is_finite(), "non-finite train bpd after epoch {epoch}");
        if last <= 0.8 * post_init {
            reached = Some((epoch + 1, last));
            break;
        }
    }
    let elapsed = started.elapsed();
    let (epochs, final_bpd) = reached.unwrap_or_else(|| {
        panic!(
            "train bpd only reached {last:.4} from post-init {post_init:.4} \
             ({:.1}% drop) within 20 epochs",
            100.0 * (1.0 - last / post_init)
        )
    });
    assert!(elapsed.as_secs() < 1800, "training took {elapsed:?} >= 30 min");
    println!(
        "criterion 06 training progress: PASS — bpd {post_init:.4} -> {final_bpd:.4} \
         ({:.1}% drop >= 20%) after {epochs} epoch(s) in {elapsed:.2?}",
        100.0 * (1.0 - final_bpd / post_init)
    );
}

/// Prior ablation: at an equal toy budget, the bijective-prior runs'
/// median test bpd is no worse than the fixed-prior runs' by more than
/// 0.05 bpd over seeds {0, 1, 2}, in under 1 hour.
#[test]
fn c07_learned_prior_is_not_worse_than_fixed() {
    let started = Instant::now();
    let base = RunConfig {
        model: ModelKind::SelfVae,
        input: (3, 16, 16),
        components: 2,
        transforms: vec![TransformSpec::Downscale { factor: 2 }],
        prior: PriorKind::RealNvp,
        flow_layers: 2,
        flow_hidden: 16,
        net: tiny_net((2, 4, 4)),
        batch_size: 50,
        epochs: 3,
        seed: 0,
        data: DataSource::Sprites { count: 1500 },
        split_fraction: 0.15,
        augment: false,
        checkpoint_every: 10,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = train::ablate_prior(&base, &[0, 1, 2], dir.path()).unwrap();
    let (nvp, fixed) = (report.median_realnvp(), report.median_fixed());
    let elapsed = started.elapsed();
    assert!(
        nvp <= fixed + 0.05,
        "realnvp median {nvp:.4} worse than fixed median {fixed:.4} by more than 0.05 \
         (per seed: {:?} vs {:?})",
        report.realnvp,
        report.fixed
    );
    assert!(elapsed.as_secs() < 3600, "ablation took {elapsed:?} >= 1 hour");
    println!(
        "criterion 07 prior ablation: PASS — median bpd realnvp {nvp:.4} vs fixed {fixed:.4} \
         (delta {:+.4} <= 0.05) in {elapsed:.2?}",
        nvp - fixed
    );
}

/// Term equivalence: RE_y - KL_u of the two-level bound, in isolation,
/// equals the VAE bound on y with the same sub-networks and the same
/// randomness, within 1e-10.
#[test]
fn c08_top_level_terms_are_a_vae_on_y() {
    let mut store = ParamStore::new();
    let mut rng = SeedRng::seed_from_u64(808);
    let sv = SelfVaeModel::build(
        &mut store,
        "m",
        (3, 4, 4),
        vec![TransformSpec::Downscale { factor: 2 }],
        &tiny_net((2, 1, 1)),
        &flow_spec(2, 8),
        2,
        &mut rng,
    )
    .unwrap();
    let x = ramp_batch(3, 3, 4, 4);
    sv.ddi(&mut store, &x, &mut rng).unwrap();
    let bind = store.bind_const();
    let (eps_u, eps_z) = sv.draw_eps(3, &mut SeedRng::seed_from_u64(809));
    let n = selfvae_elbo_with_eps(&sv, &bind, &x, &eps_u, &eps_z[0])
        .unwrap()
        .numbers();
    let isolated = n.re_y[0] - n.kl_u;

    let y = sv.levels(&x).unwrap().remove(0);
    let vae_view = VaeModel::from_parts(
        sv.q_u.clone(),
        sv.p_y1.clone(),
        sv.prior.clone(),
        sv.level_shapes[0],
        sv.components,
    );
    let on_y = vae_elbo_with_eps(&vae_view, &bind, &y, &eps_u)
        .unwrap()
        .numbers()
        .total;
    let delta = (on_y - isolated).abs();
    assert!(delta < 1e-10, "RE_y - KL_u vs VAE on y: {delta:.3e} >= 1e-10");
    println!(
        "criterion 08 term equivalence: PASS — |(RE_y - KL_u) - vae_elbo(y)| = {delta:.1e} (< 1e-10)"
    );
}

/// Transform contracts: downscale, grayscale and sketch are
/// deterministic and discrete; downscale satisfies block bounds and
/// exact half-up rounding; grayscale matches the half-up luma
/// characterization; sketch maps constant images to all-white.
#[test]
fn c09_transforms_pass_their_oracles() {
    let mut rng = SeedRng::seed_from_u64(909);
    let pixels: Vec<u8> = (0..12 * 12 * 3).map(|_| rng.gen::<u8>()).collect();
    let img = ImageU8::new(12, 12, 3, pixels).unwrap();

    // determinism, bit for bit
    for (a, b) in [
        (transforms::downscale(&img, 2).unwrap(), transforms::downscale(&img, 2).unwrap()),
        (transforms::grayscale(&img).unwrap(), transforms::grayscale(&img).unwrap()),
        (transforms::sketch(&img, 1.0).unwrap(), transforms::sketch(&img, 1.0).unwrap()),
    ] {
        assert_eq!(a.pixels, b.pixels, "transform output changed between runs");
    }

    // downscale: every output pixel lies inside its block's [min, max]
    // and is the half-up rounded block mean: n*out - sum in (-n/2, n/2]
    for factor in [2usize, 3] {
        let out = transforms::downscale(&img, factor).unwrap();
        let n = (factor * factor) as i64;
        for oy in 0..12 / factor {
            for ox in 0..12 / factor {
                for ch in 0..3 {
                    let mut sum = 0i64;
                    let mut lo = u8::MAX;
                    let mut hi = u8::MIN;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let p = img.get(oy * factor + dy, ox * factor + dx, ch);
                            sum += p as i64;
                            lo = lo.min(p);
                            hi = hi.max(p);
                        }
                    }
                    let got = out.get(oy, ox, ch);
                    assert!(
                        (lo..=hi).contains(&got),
                        "block ({oy},{ox},{ch}) at factor {factor}: {got} outside [{lo}, {hi}]"
                    );
                    let twice_residual = 2 * (n * got as i64 - sum);
                    assert!(
                        -n < twice_residual && twice_residual <= n,
                        "block ({oy},{ox},{ch}) at factor {factor}: {got} is not the \
                         half-up rounding of {sum}/{n}"
                    );
                }
            }
        }
    }

    // grayscale: half-up luma characterization, 1000*g - s in [-500, 500)
    let gray = transforms::grayscale(&img).unwrap();
    assert_eq!(gray.channels, 1);
    for y in 0..12 {
        for x in 0..12 {
            let s = 299 * img.get(y, x, 0) as i64
                + 587 * img.get(y, x, 1) as i64
                + 114 * img.get(y, x, 2) as i64;
            let r = 1000 * gray.get(y, x, 0) as i64 - s;
            assert!(
                (-500..500).contains(&r),
                "pixel ({y},{x}): gray {} is not half-up of {s}/1000",
                gray.get(y, x, 0)
            );
        }
    }
    // known pure-channel values
    for (rgb, expect) in [([255, 0, 0], 76u8), ([0, 255, 0], 150), ([0, 0, 255], 29)] {
        let one = ImageU8::new(1, 1, 3, rgb.to_vec()).unwrap();
        assert_eq!(transforms::grayscale(&one).unwrap().get(0, 0, 0), expect);
    }

    // sketch: any constant image dodges to pure white at any blur width
    for value in [0u8, 1, 64, 137, 255] {
        for sigma in [0.5, 1.0, 1.5] {
            let flat = ImageU8::constant(9, 9, 3, value);
            let s = transforms::sketch(&flat, sigma).unwrap();
            assert_eq!(s.channels, 1);
            assert!(
                s.pixels.iter().all(|&p| p == 255),
                "constant {value} at sigma {sigma} is not all-white"
            );
        }
    }
    println!(
        "criterion 09 transform contracts: PASS — deterministic outputs, downscale block \
         bounds + exact rounding, grayscale luma rounding, constant-image sketch all-white"
    );
}

/// Reproducibility: two runs with the same config and seed write
/// bit-identical metrics and checkpoints, and a checkpoint round trip
/// preserves the evaluated bpd exactly.
#[test]
fn c10_runs_are_bit_reproducible() {
    let config = RunConfig {
        model: ModelKind::SelfVae,
        input: (3, 16, 16),
        components: 2,
        transforms: vec![TransformSpec::Downscale { factor: 2 }],
        prior: PriorKind::RealNvp,
        flow_layers: 2,
        flow_hidden: 16,
        net: tiny_net((2, 4, 4)),
        batch_size: 30,
        epochs: 2,
        seed: 42,
        data: DataSource::Sprites { count: 300 },
        split_fraction: 0.2,
        augment: true,
        checkpoint_every: 1,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (dir.path().join("a"), dir.path().join("b"));
    let outcome_a = train::train(&config, &dir_a).unwrap();
    let outcome_b = train::train(&config, &dir_b).unwrap();
    assert!(outcome_a.aborted.is_none() && outcome_b.aborted.is_none());

    let mut names: Vec<String> = std::fs::read_dir(&dir_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"metrics.csv".to_string()));
    assert!(names.contains(&"checkpoint_final.bin".to_string()));
    for name in &names {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }

    // round trip: in-memory capture, disk write and reread all evaluate
    // to bit-identical test bpd
    let (_, test_set) = load_dataset(&config).unwrap();
    let eval = |ckpt: &Checkpoint| -> f64 {
        let (model, store, _) = ckpt.instantiate().unwrap();
        dataset_bpd(
            &model,
            &store,
            &test_set,
            config.batch_size,
            4,
            &mut SeedRng::seed_from_u64(99),
        )
        .unwrap()
    };
    let from_memory = eval(&outcome_a.checkpoint);
    let from_disk = eval(&Checkpoint::load(&dir_a.join("checkpoint_final.bin")).unwrap());
    let from_other_run = eval(&Checkpoint::load(&dir_b.join("checkpoint_final.bin")).unwrap());
    assert_eq!(
        from_memory.to_bits(),
        from_disk.to_bits(),
        "round trip changed eval bpd: {from_memory} vs {from_disk}"
    );
    assert_eq!(from_disk.to_bits(), from_other_run.to_bits());
    println!(
        "criterion 10 reproducibility: PASS — {} run files bit-identical, round-trip \
         eval bpd {from_disk:.6} preserved exactly",
        names.len()
    );
}

//! Training driver: data-dependent init on the first batch, epochs of
//! objective + AdaMax steps with a prefetch thread feeding batches through
//! a bounded queue, per-epoch RE/KL metrics and test bpd, periodic
//! checkpoints, and a non-finite-loss abort that keeps the last good
//! checkpoint. A fixed (config, seed, data) triple reproduces metrics and
//! checkpoints byte for byte.

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{augment, ingest_dataset, synthetic_sprites, IngestOptions};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{self, ElboNumbers};
use crate::optim::AdaMax;
use crate::pipelines::{iwae_nll, nats_to_bpd};
use crate::store::ParamStore;
use crate::tensor::Tensor;
use crate::transforms::ImageU8;
use crate::SeedRng;
use rand::SeedableRng;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

pub const METRICS_HEADER: &str = "epoch,re_x,re_y,kl_z,kl_u,elbo,test_bpd";
/// Batches the prefetch thread may run ahead of the optimizer.
const PREFETCH_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub re_x: f64,
    /// Level reconstruction terms summed into one number.
    pub re_y: f64,
    /// Level KL terms summed into one number.
    pub kl_z: f64,
    pub kl_u: f64,
    pub elbo: f64,
    pub test_bpd: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.re_x, self.re_y, self.kl_z, self.kl_u, self.elbo, self.test_bpd
        )
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(s, "{}", m.csv_row());
    }
    s
}

pub enum EpochOutcome {
    Done(EpochMetrics),
    /// The loss stopped being finite at this optimizer step; the step was
    /// not applied.
    NonFinite { step: u64 },
}

/// Stack images (uniform shape) into a `[B, C, H, W]` batch tensor.
pub fn stack_images(images: &[ImageU8]) -> Result<Tensor> {
    let (data, shape) = stack_raw(images)?;
    Ok(Tensor::from_vec(data, &shape))
}

fn stack_raw(images: &[ImageU8]) -> Result<(Vec<f64>, Vec<usize>)> {
    let Some(first) = images.first() else {
        return Err(Error::domain("cannot stack an empty batch"));
    };
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape("batch images must share a shape"));
        }
        data.extend(img.to_tensor_chw().data().iter().copied());
    }
    Ok((data, vec![images.len(), c, h, w]))
}

/// Deterministic per-epoch stream seed, well separated from the main seed.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Materialize the train/test sets a config describes.
pub fn load_dataset(config: &RunConfig) -> Result<(Vec<ImageU8>, Vec<ImageU8>)> {
    match &config.data {
        DataSource::Sprites { count } => {
            let images = synthetic_sprites(*count, config.seed);
            Ok(crate::data::split_dataset(images, config.split_fraction, config.seed))
        }
        DataSource::Dir { path, celeba_crop, resize_to } => ingest_dataset(
            path,
            config.split_fraction,
            config.seed,
            &IngestOptions { celeba_crop: *celeba_crop, resize_to: *resize_to },
        ),
    }
}

/// Mean importance-weighted bpd of `images` under `model`, batched.
pub fn dataset_bpd<R: rand::Rng>(
    model: &Model,
    store: &ParamStore,
    images: &[ImageU8],
    batch_size: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::domain("no images to evaluate"));
    }
    let bind = store.bind_const();
    let mut total = 0.0;
    for chunk in images.chunks(batch_size.max(1)) {
        let x = stack_images(chunk)?;
        total += iwae_nll(model, &bind, &x, samples, rng)? * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdaMax,
    pub train_set: Vec<ImageU8>,
    pub test_set: Vec<ImageU8>,
    /// Drives the objective's noise draws during training steps.
    rng: SeedRng,
    epochs_done: usize,
    evals_done: u64,
    initialized: bool,
}

impl Trainer {
    /// Load (or synthesize) the dataset named by the config and build the
    /// model at initialization values.
    pub fn new(config: &RunConfig) -> Result<Trainer> {
        let (train_set, test_set) = load_dataset(config)?;
        Self::from_parts(config, train_set, test_set)
    }

    /// Build a trainer over an explicit pre-split dataset.
    pub fn from_parts(
        config: &RunConfig,
        train_set: Vec<ImageU8>,
        test_set: Vec<ImageU8>,
    ) -> Result<Trainer> {
        if train_set.is_empty() {
            return Err(Error::domain("training set is empty"));
        }
        for img in train_set.iter().chain(&test_set) {
            if (img.channels, img.height, img.width) != config.input {
                return Err(Error::shape(format!(
                    "dataset images are {}x{}x{}, config expects {}x{}x{}",
                    img.channels, img.height, img.width,
                    config.input.0, config.input.1, config.input.2
                )));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = SeedRng::seed_from_u64(config.seed);
        let model = config.build_model(&mut store, &mut rng)?;
        let opt = AdaMax::new(&store, config.lr, config.beta1, config.beta2);
        Ok(Trainer {
            config: config.clone(),
            model,
            store,
            opt,
            train_set,
            test_set,
            rng,
            epochs_done: 0,
            evals_done: 0,
            initialized: false,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Data-dependent weight-norm init on the first training batch; a
    /// no-op after the first call.
    pub fn ensure_init(&mut self) -> Result<()> {
        if self.initialized {
            return Ok(());
        }
        let first: Vec<ImageU8> = self
            .train_set
            .iter()
            .take(self.config.batch_size)
            .cloned()
            .collect();
        let x = stack_images(&first)?;
        self.model.ddi(&mut self.store, &x, &mut self.rng)?;
        self.initialized = true;
        Ok(())
    }

    /// One pass over the training set: shuffled, optionally augmented
    /// batches come from a prefetch thread over a bounded queue; the
    /// optimizer consumes them in order, so timing never changes results.
    pub fn run_epoch(&mut self) -> Result<EpochOutcome> {
        self.ensure_init()?;
        let epoch = self.epochs_done;
        let stream_seed = epoch_seed(self.config.seed, epoch as u64);
        let images = self.train_set.clone();
        let batch_size = self.config.batch_size;
        let do_augment = self.config.augment;

        let (tx, rx) = mpsc::sync_channel::<Result<(Vec<f64>, Vec<usize>)>>(PREFETCH_DEPTH);
        let producer = std::thread::spawn(move || {
            use rand::seq::SliceRandom;
            let mut rng = SeedRng::seed_from_u64(stream_seed);
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<ImageU8> =
                    chunk.iter().map(|&i| images[i].clone()).collect();
                let batch = if do_augment { augment(&batch, &mut rng) } else { batch };
                if tx.send(stack_raw(&batch)).is_err() {
                    return; // consumer aborted
                }
            }
        });

        let mut sums = SumsByImage::default();
        let mut outcome = None;
        for raw in rx.iter() {
            let (data, shape) = raw?;
            let x = Tensor::from_vec(data, &shape);
            let n = x.shape()[0];
            let tape = crate::tensor::Tape::new();
            let bind = self.store.bind(&tape);
            let terms = objectives::model_elbo(&self.model, &bind, &x, &mut self.rng)?;
            let nums = terms.numbers();
            if !nums_finite(&nums) {
                outcome = Some(EpochOutcome::NonFinite { step: self.opt.step_count() + 1 });
                break;
            }
            let grads = objectives::loss_for_optimizer(&terms).backward()?;
            self.opt.step(&mut self.store, &bind, &grads)?;
            sums.add(&nums, n);
        }
        drop(rx);
        producer.join().map_err(|_| Error::contract("prefetch thread panicked"))?;
        if let Some(o) = outcome {
            return Ok(o);
        }

        let test_bpd = self.test_bpd(1)?;
        self.epochs_done += 1;
        Ok(EpochOutcome::Done(sums.finish(epoch, test_bpd)))
    }

    /// Importance-weighted test bpd with `samples` draws per image,
    /// averaged over test batches. Uses its own derived rng so evaluation
    /// never perturbs the training stream.
    pub fn test_bpd(&mut self, samples: usize) -> Result<f64> {
        self.evals_done += 1;
        let eval_seed = epoch_seed(self.config.seed ^ 0xEEA1_5EED, self.evals_done);
        if self.test_set.is_empty() {
            return Ok(f64::NAN);
        }
        let images = self.test_set.clone();
        self.eval_bpd(&images, samples, eval_seed)
    }

    /// Mean ELBO bpd over (a prefix of) the training set; the post-init
    /// reference point for training-progress checks.
    pub fn train_bpd(&mut self, max_images: usize) -> Result<f64> {
        self.ensure_init()?;
        self.evals_done += 1;
        let eval_seed = epoch_seed(self.config.seed ^ 0xEEA1_5EED, self.evals_done);
        let images: Vec<ImageU8> =
            self.train_set.iter().take(max_images).cloned().collect();
        self.eval_bpd(&images, 1, eval_seed)
    }

    fn eval_bpd(&self, images: &[ImageU8], samples: usize, eval_seed: u64) -> Result<f64> {
        let mut rng = SeedRng::seed_from_u64(eval_seed);
        dataset_bpd(&self.model, &self.store, images, self.config.batch_size, samples, &mut rng)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.store, &self.opt)
    }
}

fn nums_finite(n: &ElboNumbers) -> bool {
    n.re_x.is_finite()
        && n.kl_u.is_finite()
        && n.total.is_finite()
        && n.re_y.iter().all(|v| v.is_finite())
        && n.kl_z.iter().all(|v| v.is_finite())
}

/// Image-weighted accumulation of per-batch means.
#[derive(Default)]
struct SumsByImage {
    re_x: f64,
    re_y: f64,
    kl_z: f64,
    kl_u: f64,
    elbo: f64,
    images: usize,
}

impl SumsByImage {
    fn add(&mut self, n: &ElboNumbers, batch: usize) {
        let w = batch as f64;
        self.re_x += n.re_x * w;
        self.re_y += n.re_y.iter().sum::<f64>() * w;
        self.kl_z += n.kl_z.iter().sum::<f64>() * w;
        self.kl_u += n.kl_u * w;
        self.elbo += n.total * w;
        self.images += batch;
    }

    fn finish(self, epoch: usize, test_bpd: f64) -> EpochMetrics {
        let w = self.images as f64;
        EpochMetrics {
            epoch,
            re_x: self.re_x / w,
            re_y: self.re_y / w,
            kl_z: self.kl_z / w,
            kl_u: self.kl_u / w,
            elbo: self.elbo / w,
            test_bpd,
        }
    }
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    /// Set when training stopped early on a non-finite loss; the
    /// checkpoint is then the last good one.
    pub aborted: Option<String>,
}

/// Full training run: writes `metrics.csv` plus periodic and final
/// checkpoints into `out_dir`, and returns the collected metrics.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::domain(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut trainer = Trainer::new(config)?;
    trainer.ensure_init()?;
    let mut metrics = Vec::new();
    let mut last_good = trainer.checkpoint();
    let mut aborted = None;

    for epoch in 0..config.epochs {
        match trainer.run_epoch()? {
            EpochOutcome::Done(m) => {
                metrics.push(m);
                last_good = trainer.checkpoint();
                if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                    last_good.save(&out_dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1)))?;
                }
                std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&metrics))
                    .map_err(|e| Error::domain(format!("cannot write metrics: {e}")))?;
            }
            EpochOutcome::NonFinite { step } => {
                aborted = Some(format!(
                    "non-finite loss at optimizer step {step}; kept the last good checkpoint"
                ));
                break;
            }
        }
    }
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&metrics))
        .map_err(|e| Error::domain(format!("cannot write metrics: {e}")))?;
    last_good.save(&out_dir.join("checkpoint_final.bin"))?;
    Ok(TrainOutcome { metrics, checkpoint: last_good, aborted })
}

pub struct AblationReport {
    /// Final test bpd per seed, bijective-prior runs.
    pub realnvp: Vec<f64>,
    /// Final test bpd per seed, fixed-prior runs.
    pub fixed: Vec<f64>,
}

impl AblationReport {
    pub fn median_realnvp(&self) -> f64 {
        median(&self.realnvp)
    }

    pub fn median_fixed(&self) -> f64 {
        median(&self.fixed)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite bpd"));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Paired prior-ablation study: for each seed, train once with the
/// bijective prior and once with the fixed prior at an otherwise equal
/// budget, recording each run's final test bpd.
pub fn ablate_prior(base: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<AblationReport> {
    use crate::model::PriorKind;
    let mut report = AblationReport { realnvp: Vec::new(), fixed: Vec::new() };
    for &seed in seeds {
        for kind in [PriorKind::RealNvp, PriorKind::Fixed] {
            let name = match kind {
                PriorKind::RealNvp => "realnvp",
                PriorKind::Fixed => "fixed",
                PriorKind::Mog => "mog",
            };
            let cfg = RunConfig { seed, prior: kind, ..base.clone() };
            let outcome = train(&cfg, &out_dir.join(format!("{name}_seed{seed}")))?;
            if let Some(reason) = &outcome.aborted {
                return Err(Error::domain(format!("{name} seed {seed}: {reason}")));
            }
            let bpd = outcome
                .metrics
                .last()
                .map(|m| m.test_bpd)
                .ok_or_else(|| Error::domain("ablation run produced no epochs"))?;
            match kind {
                PriorKind::RealNvp => report.realnvp.push(bpd),
                _ => report.fixed.push(bpd),
            }
        }
    }
    Ok(report)
}

/// ELBO (nats, to be maximized) expressed as bits per dimension.
pub fn elbo_to_bpd(elbo: f64, data_dim: usize) -> f64 {
    nats_to_bpd(-elbo, data_dim)
}

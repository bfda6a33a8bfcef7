//! Command-line front end: training, IWAE evaluation, sampling,
//! reconstruction, image transforms, latent interpolation, and the
//! prior-ablation study.

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use selfvae::checkpoint::Checkpoint;
use selfvae::config::RunConfig;
use selfvae::model::Model;
use selfvae::pipelines::{self, ReconMode};
use selfvae::train;
use selfvae::transforms::{apply_chain, load_png, save_png, TransformSpec};
use selfvae::{Error, Result, SeedRng};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "selfvae",
    version,
    about = "Self-supervised hierarchical VAE with a bijective prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Pure ancestral sampling (nothing transmitted).
    Gen,
    /// Ground-truth y, latents inferred from x.
    CondGen,
    /// Ground-truth y, only u inferred.
    CondRecon,
    /// Only u inferred; everything below is sampled.
    Recon1,
    /// u and level latents inferred; y resampled.
    Recon2,
}

impl From<ModeArg> for ReconMode {
    fn from(m: ModeArg) -> ReconMode {
        match m {
            ModeArg::Gen => ReconMode::Generation,
            ModeArg::CondGen => ReconMode::ConditionalGeneration,
            ModeArg::CondRecon => ReconMode::ConditionalReconstruction,
            ModeArg::Recon1 => ReconMode::Reconstruction1,
            ModeArg::Recon2 => ReconMode::Reconstruction2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformKind {
    Downscale,
    Grayscale,
    Sketch,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and checkpoints into --out.
    Train {
        /// Run-config file (key = value sections); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Importance-weighted test bpd of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Importance samples per image.
        #[arg(long, default_value_t = 512)]
        iw_samples: usize,
        /// Evaluation noise seed (defaults to the run seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample images from the model prior into a grid PNG.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Decode means and mixture modes instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "samples.png")]
        out: PathBuf,
    },
    /// Run one reconstruction scheme on an input image.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "reconstruction.png")]
        out: PathBuf,
    },
    /// Apply a deterministic image transform to a PNG.
    Transform {
        #[arg(long, value_enum)]
        kind: TransformKind,
        /// Downscale factor.
        #[arg(long, default_value_t = 2)]
        factor: usize,
        /// Sketch blur sigma.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "transformed.png")]
        out: PathBuf,
    },
    /// Interpolate between two images through the top latent.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "interpolation.png")]
        out: PathBuf,
    },
    /// Paired fixed-vs-bijective prior study over several seeds.
    AblatePrior {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated run seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(
            &std::fs::read_to_string(p)
                .map_err(|e| Error::domain(format!("cannot read {}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(Model, selfvae::store::ParamStore, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config.clone();
    let (model, store, _) = ckpt.instantiate()?;
    Ok((model, store, config))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let outcome = train::train(&cfg, &out)?;
            for m in &outcome.metrics {
                println!(
                    "epoch {}: elbo = {:.4}, test_bpd = {:.6}",
                    m.epoch, m.elbo, m.test_bpd
                );
            }
            println!("metrics: {}", out.join("metrics.csv").display());
            println!("checkpoint: {}", out.join("checkpoint_final.bin").display());
            if let Some(reason) = outcome.aborted {
                return Err(Error::domain(format!("training aborted: {reason}")));
            }
            Ok(())
        }
        Command::Eval { checkpoint, iw_samples, seed } => {
            let (model, store, cfg) = load_model(&checkpoint)?;
            let (_, test_set) = train::load_dataset(&cfg)?;
            let mut rng = SeedRng::seed_from_u64(seed.unwrap_or(cfg.seed));
            let bpd = train::dataset_bpd(
                &model,
                &store,
                &test_set,
                cfg.batch_size,
                iw_samples,
                &mut rng,
            )?;
            println!("iw_samples = {iw_samples}");
            println!("test_bpd = {bpd:.12}");
            Ok(())
        }
        Command::Generate { checkpoint, count, cols, seed, deterministic, out } => {
            let (model, store, _) = load_model(&checkpoint)?;
            let bind = store.bind_const();
            let mut rng = SeedRng::seed_from_u64(seed);
            let images = pipelines::generate(&model, &bind, count, &mut rng, deterministic)?;
            save_png(&pipelines::image_grid(&images, cols.max(1))?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Reconstruct { checkpoint, input, mode, seed, deterministic, out } => {
            let (model, store, _) = load_model(&checkpoint)?;
            let Model::SelfVae(model) = &model else {
                return Err(Error::contract(
                    "reconstruction modes need a selfvae checkpoint",
                ));
            };
            let bind = store.bind_const();
            let image = load_png(&input)?;
            let mut rng = SeedRng::seed_from_u64(seed);
            let (recon, sent) =
                pipelines::reconstruct(model, &bind, &image, mode.into(), &mut rng, deterministic)?;
            save_png(&recon, &out)?;
            println!("sent_bytes = {sent}");
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Transform { kind, factor, sigma, input, out } => {
            let spec = match kind {
                TransformKind::Downscale => TransformSpec::Downscale { factor },
                TransformKind::Grayscale => TransformSpec::Grayscale,
                TransformKind::Sketch => TransformSpec::Sketch { blur_sigma: sigma },
            };
            let image = load_png(&input)?;
            let result = apply_chain(&image, &[spec])?
                .pop()
                .ok_or_else(|| Error::contract("transform chain produced no output"))?;
            save_png(&result, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Interpolate { checkpoint, a, b, steps, seed, deterministic, out } => {
            let (model, store, _) = load_model(&checkpoint)?;
            let Model::SelfVae(model) = &model else {
                return Err(Error::contract("interpolation needs a selfvae checkpoint"));
            };
            let bind = store.bind_const();
            let img_a = load_png(&a)?;
            let img_b = load_png(&b)?;
            let interp =
                pipelines::interpolate_u(model, &bind, &img_a, &img_b, steps, seed, deterministic)?;
            save_png(&pipelines::image_grid(&interp.frames, steps)?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::AblatePrior { config, seeds, out } => {
            let cfg = load_config(&config, None)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::domain(format!("bad seed {s:?}")))
                })
                .collect::<Result<_>>()?;
            if seeds.is_empty() {
                return Err(Error::domain("need at least one seed"));
            }
            let report = train::ablate_prior(&cfg, &seeds, &out)?;
            for (seed, (nvp, fixed)) in
                seeds.iter().zip(report.realnvp.iter().zip(&report.fixed))
            {
                println!("seed {seed}: realnvp = {nvp:.6}, fixed = {fixed:.6}");
            }
            println!("realnvp median test bpd = {:.6}", report.median_realnvp());
            println!("fixed median test bpd = {:.6}", report.median_fixed());
            println!(
                "delta (realnvp - fixed) = {:.6}",
                report.median_realnvp() - report.median_fixed()
            );
            Ok(())
        }
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

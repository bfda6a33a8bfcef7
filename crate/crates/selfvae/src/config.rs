//! Run configuration: a small line-oriented `key = value` text format
//! with `[section]` headers — diffable, no parser dependency — plus the
//! glue that turns a parsed config into a model.

use crate::error::{Error, Result};
use crate::model::{Model, PriorKind, PriorSpec, SelfVaeModel, VaeModel};
use crate::nets::NetConfig;
use crate::store::ParamStore;
use crate::transforms::TransformSpec;
use rand::Rng;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    SelfVae,
    SelfVae3Lvl,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::SelfVae => "selfvae",
            ModelKind::SelfVae3Lvl => "selfvae-3lvl",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "selfvae" => Ok(ModelKind::SelfVae),
            "selfvae-3lvl" => Ok(ModelKind::SelfVae3Lvl),
            other => Err(Error::domain(format!(
                "unknown model kind {other:?} (expected vae, selfvae, or selfvae-3lvl)"
            ))),
        }
    }

    /// Number of self-supervised levels (downscale-style transforms).
    pub fn num_levels(&self) -> usize {
        match self {
            ModelKind::Vae => 0,
            ModelKind::SelfVae => 1,
            ModelKind::SelfVae3Lvl => 2,
        }
    }
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Procedural sprites, fully determined by the run seed.
    Sprites { count: usize },
    /// A directory of PNGs.
    Dir {
        path: PathBuf,
        celeba_crop: bool,
        resize_to: Option<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Input resolution as (channels, height, width).
    pub input: (usize, usize, usize),
    /// Mixture components in every pixel decoder.
    pub components: usize,
    /// Transform chain in applied order (finest first).
    pub transforms: Vec<TransformSpec>,
    pub prior: PriorKind,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub mog_components: usize,
    pub net: NetConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataSource,
    pub split_fraction: f64,
    pub augment: bool,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prior = PriorSpec::default();
        RunConfig {
            model: ModelKind::SelfVae,
            input: (3, 16, 16),
            components: 5,
            transforms: vec![TransformSpec::Downscale { factor: 2 }],
            prior: prior.kind,
            flow_layers: prior.flow_layers,
            flow_hidden: prior.flow_hidden,
            mog_components: prior.mog_components,
            net: NetConfig {
                growth_rate: 8,
                blocks_per_stage: 1,
                stages: 1,
                latent_shape: (8, 4, 4),
                base_width: 8,
                attention_reduction: 4,
            },
            lr: crate::optim::AdaMax::DEFAULT_LR,
            beta1: crate::optim::AdaMax::DEFAULT_BETA1,
            beta2: crate::optim::AdaMax::DEFAULT_BETA2,
            batch_size: 50,
            epochs: 10,
            seed: 0,
            data: DataSource::Sprites { count: 5000 },
            split_fraction: 0.15,
            augment: false,
            checkpoint_every: 5,
        }
    }
}

fn parse_triple(s: &str, what: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<_> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::domain(format!("{what}: expected CxHxW, got {s:?}")));
    }
    let mut nums = [0usize; 3];
    for (n, p) in nums.iter_mut().zip(&parts) {
        *n = p
            .trim()
            .parse()
            .map_err(|_| Error::domain(format!("{what}: bad number {p:?}")))?;
    }
    Ok((nums[0], nums[1], nums[2]))
}

fn parse_pair(s: &str, what: &str) -> Result<(usize, usize)> {
    let parts: Vec<_> = s.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::domain(format!("{what}: expected HxW, got {s:?}")));
    }
    let a = parts[0].trim().parse().map_err(|_| Error::domain(format!("{what}: bad number")))?;
    let b = parts[1].trim().parse().map_err(|_| Error::domain(format!("{what}: bad number")))?;
    Ok((a, b))
}

fn parse_transform(s: &str) -> Result<TransformSpec> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n.trim(), Some(a.trim())),
        None => (s.trim(), None),
    };
    match (name, arg) {
        ("downscale", Some(f)) => Ok(TransformSpec::Downscale {
            factor: f.parse().map_err(|_| Error::domain(format!("bad downscale factor {f:?}")))?,
        }),
        ("downscale", None) => Ok(TransformSpec::Downscale { factor: 2 }),
        ("grayscale", None) => Ok(TransformSpec::Grayscale),
        ("sketch", Some(s)) => Ok(TransformSpec::Sketch {
            blur_sigma: s.parse().map_err(|_| Error::domain(format!("bad sketch sigma {s:?}")))?,
        }),
        ("sketch", None) => Ok(TransformSpec::Sketch { blur_sigma: 1.0 }),
        _ => Err(Error::domain(format!("unknown transform {s:?}"))),
    }
}

fn format_transform(t: &TransformSpec) -> String {
    match t {
        TransformSpec::Downscale { factor } => format!("downscale:{factor}"),
        TransformSpec::Grayscale => "grayscale".to_string(),
        TransformSpec::Sketch { blur_sigma } => format!("sketch:{blur_sigma}"),
    }
}

impl RunConfig {
    /// Parse the `key = value` text format. Unknown keys are errors;
    /// missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut transforms_set = false;
        let mut data_dir: Option<PathBuf> = None;
        let mut sprites_count: Option<usize> = None;
        let mut source: Option<String> = None;
        let mut celeba = false;
        let mut resize = None;
        let mut section = String::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::domain(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = format!("{section}.{}", key.trim());
            let value = value.trim();
            let bad_num = |what: &str| Error::domain(format!("{key}: bad {what} {value:?}"));

            match key.as_str() {
                "model.kind" => cfg.model = ModelKind::parse(value)?,
                "model.input" => cfg.input = parse_triple(value, &key)?,
                "model.components" => {
                    cfg.components = value.parse().map_err(|_| bad_num("count"))?
                }
                "model.transforms" => {
                    cfg.transforms = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(parse_transform)
                        .collect::<Result<_>>()?;
                    transforms_set = true;
                }
                "prior.kind" => {
                    cfg.prior = match value {
                        "fixed" => PriorKind::Fixed,
                        "mog" => PriorKind::Mog,
                        "realnvp" => PriorKind::RealNvp,
                        other => {
                            return Err(Error::domain(format!(
                                "unknown prior kind {other:?} (expected fixed, mog, or realnvp)"
                            )))
                        }
                    }
                }
                "prior.flow_layers" => {
                    cfg.flow_layers = value.parse().map_err(|_| bad_num("count"))?
                }
                "prior.flow_hidden" => {
                    cfg.flow_hidden = value.parse().map_err(|_| bad_num("count"))?
                }
                "prior.mog_components" => {
                    cfg.mog_components = value.parse().map_err(|_| bad_num("count"))?
                }
                "net.growth_rate" => cfg.net.growth_rate = value.parse().map_err(|_| bad_num("count"))?,
                "net.blocks_per_stage" => {
                    cfg.net.blocks_per_stage = value.parse().map_err(|_| bad_num("count"))?
                }
                "net.stages" => cfg.net.stages = value.parse().map_err(|_| bad_num("count"))?,
                "net.latent" => cfg.net.latent_shape = parse_triple(value, &key)?,
                "net.base_width" => {
                    cfg.net.base_width = value.parse().map_err(|_| bad_num("count"))?
                }
                "net.attention_reduction" => {
                    cfg.net.attention_reduction = value.parse().map_err(|_| bad_num("count"))?
                }
                "optimizer.lr" => cfg.lr = value.parse().map_err(|_| bad_num("float"))?,
                "optimizer.beta1" => cfg.beta1 = value.parse().map_err(|_| bad_num("float"))?,
                "optimizer.beta2" => cfg.beta2 = value.parse().map_err(|_| bad_num("float"))?,
                "train.batch_size" => {
                    cfg.batch_size = value.parse().map_err(|_| bad_num("count"))?
                }
                "train.epochs" => cfg.epochs = value.parse().map_err(|_| bad_num("count"))?,
                "train.seed" => cfg.seed = value.parse().map_err(|_| bad_num("seed"))?,
                "train.split" => {
                    cfg.split_fraction = value.parse().map_err(|_| bad_num("fraction"))?
                }
                "train.augment" => {
                    cfg.augment = value.parse().map_err(|_| bad_num("bool"))?
                }
                "train.checkpoint_every" => {
                    cfg.checkpoint_every = value.parse().map_err(|_| bad_num("count"))?
                }
                "data.source" => source = Some(value.to_string()),
                "data.dir" => data_dir = Some(PathBuf::from(value)),
                "data.count" => sprites_count = Some(value.parse().map_err(|_| bad_num("count"))?),
                "data.celeba_crop" => celeba = value.parse().map_err(|_| bad_num("bool"))?,
                "data.resize" => resize = Some(parse_pair(value, &key)?),
                other => return Err(Error::domain(format!("unknown config key {other:?}"))),
            }
        }

        cfg.data = match source.as_deref() {
            None | Some("sprites") => {
                if let Some(path) = data_dir {
                    DataSource::Dir { path, celeba_crop: celeba, resize_to: resize }
                } else {
                    DataSource::Sprites { count: sprites_count.unwrap_or(5000) }
                }
            }
            Some("dir") => DataSource::Dir {
                path: data_dir
                    .ok_or_else(|| Error::domain("data.source = dir requires data.dir"))?,
                celeba_crop: celeba,
                resize_to: resize,
            },
            Some(other) => {
                return Err(Error::domain(format!(
                    "unknown data source {other:?} (expected sprites or dir)"
                )))
            }
        };

        if !transforms_set && cfg.model == ModelKind::Vae {
            cfg.transforms.clear();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.model.num_levels();
        if self.model == ModelKind::Vae {
            if !self.transforms.is_empty() {
                return Err(Error::contract("a plain VAE takes no transform chain"));
            }
        } else if self.transforms.len() != want {
            return Err(Error::contract(format!(
                "{} needs exactly {want} transform(s), got {}",
                self.model.as_str(),
                self.transforms.len()
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.components == 0 {
            return Err(Error::contract("batch size, epochs, and components must be positive"));
        }
        if !(0.0..1.0).contains(&self.split_fraction) {
            return Err(Error::domain(format!(
                "split fraction must be in [0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }

    /// Serialize in a fixed key order; `parse` inverts this exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "kind = {}", self.model.as_str());
        let _ = writeln!(s, "input = {}x{}x{}", self.input.0, self.input.1, self.input.2);
        let _ = writeln!(s, "components = {}", self.components);
        let chain: Vec<String> = self.transforms.iter().map(format_transform).collect();
        let _ = writeln!(s, "transforms = {}", chain.join(", "));
        let _ = writeln!(s, "\n[prior]");
        let kind = match self.prior {
            PriorKind::Fixed => "fixed",
            PriorKind::Mog => "mog",
            PriorKind::RealNvp => "realnvp",
        };
        let _ = writeln!(s, "kind = {kind}");
        let _ = writeln!(s, "flow_layers = {}", self.flow_layers);
        let _ = writeln!(s, "flow_hidden = {}", self.flow_hidden);
        let _ = writeln!(s, "mog_components = {}", self.mog_components);
        let _ = writeln!(s, "\n[net]");
        let _ = writeln!(s, "growth_rate = {}", self.net.growth_rate);
        let _ = writeln!(s, "blocks_per_stage = {}", self.net.blocks_per_stage);
        let _ = writeln!(s, "stages = {}", self.net.stages);
        let (lc, lh, lw) = self.net.latent_shape;
        let _ = writeln!(s, "latent = {lc}x{lh}x{lw}");
        let _ = writeln!(s, "base_width = {}", self.net.base_width);
        let _ = writeln!(s, "attention_reduction = {}", self.net.attention_reduction);
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split = {}", self.split_fraction);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "\n[data]");
        match &self.data {
            DataSource::Sprites { count } => {
                let _ = writeln!(s, "source = sprites");
                let _ = writeln!(s, "count = {count}");
            }
            DataSource::Dir { path, celeba_crop, resize_to } => {
                let _ = writeln!(s, "source = dir");
                let _ = writeln!(s, "dir = {}", path.display());
                let _ = writeln!(s, "celeba_crop = {celeba_crop}");
                if let Some((h, w)) = resize_to {
                    let _ = writeln!(s, "resize = {h}x{w}");
                }
            }
        }
        s
    }

    pub fn prior_spec(&self) -> PriorSpec {
        PriorSpec {
            kind: self.prior,
            flow_layers: self.flow_layers,
            flow_hidden: self.flow_hidden,
            mog_components: self.mog_components,
        }
    }

    /// Construct the configured model, registering parameters in `store`.
    pub fn build_model<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<Model> {
        self.validate()?;
        match self.model {
            ModelKind::Vae => Ok(Model::Vae(VaeModel::build(
                store,
                "model",
                self.input,
                &self.net,
                &self.prior_spec(),
                self.components,
                rng,
            )?)),
            ModelKind::SelfVae | ModelKind::SelfVae3Lvl => Ok(Model::SelfVae(SelfVaeModel::build(
                store,
                "model",
                self.input,
                self.transforms.clone(),
                &self.net,
                &self.prior_spec(),
                self.components,
                rng,
            )?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_round_trips_the_default() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn serialize_parse_round_trips_a_customized_config() {
        let cfg = RunConfig {
            model: ModelKind::SelfVae3Lvl,
            input: (1, 32, 32),
            components: 3,
            transforms: vec![
                TransformSpec::Downscale { factor: 2 },
                TransformSpec::Downscale { factor: 2 },
            ],
            prior: PriorKind::Mog,
            mog_components: 12,
            lr: 0.0015,
            batch_size: 17,
            epochs: 3,
            seed: 99,
            data: DataSource::Dir {
                path: PathBuf::from("/tmp/pngs"),
                celeba_crop: true,
                resize_to: Some((32, 32)),
            },
            split_fraction: 0.25,
            augment: true,
            ..RunConfig::default()
        };
        let text = cfg.serialize();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn comments_blanks_and_partial_files_are_fine() {
        let text = "
            # a comment
            [model]
            kind = vae        # trailing comment
            transforms =
            input = 1x8x8

            [train]
            epochs = 2
        ";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model, ModelKind::Vae);
        assert_eq!(cfg.input, (1, 8, 8));
        assert_eq!(cfg.epochs, 2);
        assert!(cfg.transforms.is_empty());
        assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn vae_without_explicit_transforms_drops_the_default_chain() {
        let cfg = RunConfig::parse("[model]\nkind = vae\n").unwrap();
        assert!(cfg.transforms.is_empty());
    }

    #[test]
    fn bad_inputs_are_named_in_the_error() {
        for (text, needle) in [
            ("[model]\nkind = resnet\n", "resnet"),
            ("[model]\nbogus_key = 3\n", "bogus_key"),
            ("[model]\ninput = 3x16\n", "model.input"),
            ("just words\n", "key = value"),
            ("[train]\nsplit = 1.5\n", "split"),
            ("[model]\nkind = selfvae\ntransforms =\n", "transform"),
            ("[model]\ntransforms = upscale:2\n", "upscale"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?} -> {err}");
        }
    }

    #[test]
    fn model_kinds_build_matching_models() {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let cfg = RunConfig {
            model: ModelKind::Vae,
            input: (1, 8, 8),
            transforms: vec![],
            prior: PriorKind::Fixed,
            net: NetConfig {
                growth_rate: 2,
                blocks_per_stage: 1,
                stages: 1,
                latent_shape: (2, 4, 4),
                base_width: 2,
                attention_reduction: 2,
            },
            components: 2,
            ..RunConfig::default()
        };
        let model = cfg
            .build_model(&mut store, &mut crate::SeedRng::seed_from_u64(0))
            .unwrap();
        assert!(matches!(model, Model::Vae(_)));
        assert_eq!(model.input_shape(), (1, 8, 8));

        let cfg = RunConfig {
            model: ModelKind::SelfVae,
            transforms: vec![TransformSpec::Downscale { factor: 2 }],
            ..cfg
        };
        let mut store = ParamStore::new();
        let model = cfg
            .build_model(&mut store, &mut crate::SeedRng::seed_from_u64(0))
            .unwrap();
        let Model::SelfVae(m) = &model else { panic!("expected selfvae") };
        assert_eq!(m.num_levels(), 1);
    }
}

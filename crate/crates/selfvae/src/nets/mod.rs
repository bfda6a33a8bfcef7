//! Convolutional networks for encoders and decoders.
//!
//! All networks are assembled from weight-normalized convolutions
//! ([`WnConv2d`] / [`WnConvT2d`]), densely connected blocks
//! ([`DenseBlock`]) and channel-attention gates ([`ChannelAttention`]),
//! with ELU activations throughout. There is no batch normalization; the
//! gain/bias of every conv is set by data-dependent initialization on the
//! first real batch instead (`ddi` on each network).
//!
//! Spatial resolution changes only through strided convs (down, 3x3
//! stride 2) and transposed convs (up, 4x4 stride 2), so encoder inputs
//! must be `2^stages` times the latent resolution.

mod blocks;
mod layers;

pub use blocks::{ChannelAttention, DenseBlock};
pub use layers::{WnConv2d, WnConvT2d};

use crate::dist::{DiagGaussianParams, MixtureLogisticParams};
use crate::error::{Error, Result};
use crate::store::{Binding, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Shared sizing knobs for every network in a model.
///
/// `blocks_per_stage` is the number of inner convs in the dense block each
/// stage carries; every inner conv adds `growth_rate` channels.
/// `latent_shape` is (channels, height, width) of the latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub growth_rate: usize,
    pub blocks_per_stage: usize,
    pub stages: usize,
    pub latent_shape: (usize, usize, usize),
    /// Stem width; stage widths double from here on the way down.
    pub base_width: usize,
    /// Bottleneck ratio of the channel-attention gates.
    pub attention_reduction: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            growth_rate: 8,
            blocks_per_stage: 2,
            stages: 2,
            latent_shape: (16, 8, 8),
            base_width: 16,
            attention_reduction: 4,
        }
    }
}

impl NetConfig {
    pub fn latent_numel(&self) -> usize {
        self.latent_shape.0 * self.latent_shape.1 * self.latent_shape.2
    }
}

/// Number of doublings between two resolutions; errors unless `from` is
/// `to` times an exact power of two.
fn power_of_two_ratio(from: usize, to: usize, what: &str) -> Result<usize> {
    if to == 0 || from < to || from % to != 0 || !(from / to).is_power_of_two() {
        return Err(Error::config(format!(
            "{what}: {from} is not {to} times a power of two"
        )));
    }
    Ok((from / to).trailing_zeros() as usize)
}

/// One unit of a sequential stack.
#[derive(Clone)]
enum Layer {
    Conv(WnConv2d),
    ConvT(WnConvT2d),
    Dense(DenseBlock),
    Attn(ChannelAttention),
    Elu,
}

impl Layer {
    fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.apply(bind, x),
            Layer::ConvT(c) => c.apply(bind, x),
            Layer::Dense(d) => d.apply(bind, x),
            Layer::Attn(a) => a.apply(bind, x),
            Layer::Elu => Ok(x.elu()),
        }
    }

    fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.ddi(store, x),
            Layer::ConvT(c) => c.ddi(store, x),
            Layer::Dense(d) => d.ddi(store, x),
            Layer::Attn(a) => a.ddi(store, x),
            Layer::Elu => Ok(x.elu()),
        }
    }
}

#[derive(Clone)]
struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.apply(bind, &h)?;
        }
        Ok(h)
    }

    fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.ddi(store, &h)?;
        }
        Ok(h)
    }
}

/// Builds the shared trunk pattern: dense block, attention gate.
/// Returns the new channel count.
fn push_block<R: Rng>(
    store: &mut ParamStore,
    layers: &mut Vec<Layer>,
    name: &str,
    channels: usize,
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<usize> {
    let dense = DenseBlock::build(
        store,
        &format!("{name}.dense"),
        channels,
        cfg.blocks_per_stage,
        cfg.growth_rate,
        rng,
    )?;
    let out = dense.out_channels();
    layers.push(Layer::Dense(dense));
    layers.push(Layer::Attn(ChannelAttention::build(
        store,
        &format!("{name}.attn"),
        out,
        cfg.attention_reduction,
        rng,
    )?));
    Ok(out)
}

/// Splits a `[B, 2*C, H, W]` head output into mean / log-std halves.
/// Smooth bound on every head's log-scale output. Raw pre-activations can
/// leave the data-dependent-init regime once sampled latents feed the
/// conditional networks; exponentiating an unbounded log-scale then turns
/// tail inputs into astronomically large KL/likelihood terms. The squash
/// is the identity near zero and caps |log scale| at this value.
pub const LOG_SCALE_BOUND: f64 = 5.0;

fn bound_log_scale(t: &Tensor) -> Tensor {
    t.scale(1.0 / LOG_SCALE_BOUND).tanh().scale(LOG_SCALE_BOUND)
}

fn gaussian_from_head(t: &Tensor, channels: usize) -> Result<DiagGaussianParams> {
    let mu = t.slice_axis(1, 0, channels)?;
    let log_sigma = bound_log_scale(&t.slice_axis(1, channels, channels)?);
    DiagGaussianParams::new(mu, log_sigma)
}

/// Splits a `[B, 3*C*I, H, W]` head output into per-subpixel mixture
/// parameters `[B, C, H, W, I]`.
fn mixture_from_head(t: &Tensor, channels: usize, components: usize) -> Result<MixtureLogisticParams> {
    let s = t.shape().to_vec();
    let (b, h, w) = (s[0], s[2], s[3]);
    let ci = channels * components;
    let pull = |start: usize| -> Result<Tensor> {
        t.slice_axis(1, start, ci)?
            .reshape(&[b, channels, components, h, w])?
            .permute(&[0, 1, 3, 4, 2])
    };
    MixtureLogisticParams::new(pull(0)?, pull(ci)?, bound_log_scale(&pull(2 * ci)?))
}

/// Encoder from an image-shaped input to diagonal-Gaussian latent
/// parameters: stem conv, then per stage a dense block, attention gate and
/// strided downsampling conv, then a trunk block and a 1x1 head producing
/// mean and log-std maps.
#[derive(Clone)]
pub struct GaussianEncoder {
    seq: Sequential,
    latent: (usize, usize, usize),
}

impl GaussianEncoder {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        in_channels: usize,
        in_hw: (usize, usize),
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (lc, lh, lw) = cfg.latent_shape;
        let down_h = power_of_two_ratio(in_hw.0, lh, "encoder height")?;
        let down_w = power_of_two_ratio(in_hw.1, lw, "encoder width")?;
        if down_h != cfg.stages || down_w != cfg.stages {
            return Err(Error::config(format!(
                "encoder needs {down_h}x{down_w} downsamplings but stages = {}",
                cfg.stages
            )));
        }
        let mut layers = Vec::new();
        let mut width = cfg.base_width;
        layers.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.stem"),
            in_channels,
            width,
            3,
            1,
            1,
            rng,
        )?));
        layers.push(Layer::Elu);
        for s in 0..cfg.stages {
            let cur = push_block(store, &mut layers, &format!("{scope}.stage{s}"), width, cfg, rng)?;
            width = cfg.base_width << (s + 1);
            layers.push(Layer::Conv(WnConv2d::build(
                store,
                &format!("{scope}.stage{s}.down"),
                cur,
                width,
                3,
                2,
                1,
                rng,
            )?));
            layers.push(Layer::Elu);
        }
        let cur = push_block(store, &mut layers, &format!("{scope}.trunk"), width, cfg, rng)?;
        layers.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.head"),
            cur,
            2 * lc,
            1,
            1,
            0,
            rng,
        )?));
        Ok(Self {
            seq: Sequential { layers },
            latent: cfg.latent_shape,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent
    }

    pub fn apply(&self, bind: &Binding, x: &Tensor) -> Result<DiagGaussianParams> {
        gaussian_from_head(&self.seq.apply(bind, x)?, self.latent.0)
    }

    /// Data-dependent init on a real batch, layer by layer in execution
    /// order; returns the resulting latent parameters.
    pub fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<DiagGaussianParams> {
        gaussian_from_head(&self.seq.ddi(store, x)?, self.latent.0)
    }
}

/// Decoder from a spatial latent to discretized-logistic mixture
/// parameters for an image: 1x1 conv into the widest stage, then per
/// stage a transposed upsampling conv, dense block and attention gate,
/// with a 1x1 head emitting `3 * channels * components` maps.
#[derive(Clone)]
pub struct ImageDecoder {
    seq: Sequential,
    latent: (usize, usize, usize),
    out_channels: usize,
    components: usize,
}

impl ImageDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        latent: (usize, usize, usize),
        out_channels: usize,
        out_hw: (usize, usize),
        components: usize,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        let ups_h = power_of_two_ratio(out_hw.0, latent.1, "decoder height")?;
        let ups_w = power_of_two_ratio(out_hw.1, latent.2, "decoder width")?;
        if ups_h != ups_w {
            return Err(Error::config(format!(
                "decoder upsampling must match per axis, got {ups_h} vs {ups_w}"
            )));
        }
        let mut layers = Vec::new();
        let mut width = cfg.base_width << ups_h;
        layers.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.stem"),
            latent.0,
            width,
            1,
            1,
            0,
            rng,
        )?));
        layers.push(Layer::Elu);
        let mut cur = push_block(store, &mut layers, &format!("{scope}.trunk"), width, cfg, rng)?;
        for s in 0..ups_h {
            width = cfg.base_width << (ups_h - 1 - s);
            layers.push(Layer::ConvT(WnConvT2d::build(
                store,
                &format!("{scope}.stage{s}.up"),
                cur,
                width,
                4,
                2,
                1,
                rng,
            )?));
            layers.push(Layer::Elu);
            cur = push_block(store, &mut layers, &format!("{scope}.stage{s}"), width, cfg, rng)?;
        }
        layers.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.head"),
            cur,
            3 * out_channels * components,
            1,
            1,
            0,
            rng,
        )?));
        Ok(Self {
            seq: Sequential { layers },
            latent,
            out_channels,
            components,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// `z` is the spatial latent `[B, C, H, W]`.
    pub fn apply(&self, bind: &Binding, z: &Tensor) -> Result<MixtureLogisticParams> {
        mixture_from_head(&self.seq.apply(bind, z)?, self.out_channels, self.components)
    }

    pub fn ddi(&self, store: &mut ParamStore, z: &Tensor) -> Result<MixtureLogisticParams> {
        mixture_from_head(&self.seq.ddi(store, z)?, self.out_channels, self.components)
    }
}

/// Conditional Gaussian net for latent-on-evidence conditionals such as
/// p(z | y, u): the conditioning image y is embedded by a small conv
/// stack down to the latent resolution and concatenated channel-wise with
/// the spatial latent u, then a trunk block and 1x1 head produce the
/// Gaussian parameters.
#[derive(Clone)]
pub struct CondGaussianNet {
    y_embed: Sequential,
    trunk: Sequential,
    z_latent: (usize, usize, usize),
    u_latent: Option<(usize, usize, usize)>,
}

impl CondGaussianNet {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        y_channels: usize,
        y_hw: (usize, usize),
        u_latent: Option<(usize, usize, usize)>,
        z_latent: (usize, usize, usize),
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let downs = power_of_two_ratio(y_hw.0, z_latent.1, "conditioning height")?;
        let downs_w = power_of_two_ratio(y_hw.1, z_latent.2, "conditioning width")?;
        if downs != downs_w {
            return Err(Error::config(format!(
                "conditioning downsampling must match per axis, got {downs} vs {downs_w}"
            )));
        }
        if let Some((_, uh, uw)) = u_latent {
            if (uh, uw) != (z_latent.1, z_latent.2) {
                return Err(Error::config(format!(
                    "latent resolutions must agree: u is {uh}x{uw}, z is {}x{}",
                    z_latent.1, z_latent.2
                )));
            }
        }
        let mut embed = Vec::new();
        embed.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.embed.stem"),
            y_channels,
            cfg.base_width,
            3,
            1,
            1,
            rng,
        )?));
        embed.push(Layer::Elu);
        for s in 0..downs {
            embed.push(Layer::Conv(WnConv2d::build(
                store,
                &format!("{scope}.embed.down{s}"),
                cfg.base_width,
                cfg.base_width,
                3,
                2,
                1,
                rng,
            )?));
            embed.push(Layer::Elu);
        }
        let mut trunk = Vec::new();
        let in_ch = cfg.base_width + u_latent.map_or(0, |(uc, _, _)| uc);
        let cur = push_block(store, &mut trunk, &format!("{scope}.trunk"), in_ch, cfg, rng)?;
        trunk.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.head"),
            cur,
            2 * z_latent.0,
            1,
            1,
            0,
            rng,
        )?));
        Ok(Self {
            y_embed: Sequential { layers: embed },
            trunk: Sequential { layers: trunk },
            z_latent,
            u_latent,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.z_latent
    }

    fn join(&self, embedded: Tensor, u: Option<&Tensor>) -> Result<Tensor> {
        match (self.u_latent, u) {
            (None, None) => Ok(embedded),
            (Some((uc, uh, uw)), Some(u)) => {
                let b = embedded.shape()[0];
                let u = u.reshape(&[b, uc, uh, uw])?;
                Tensor::concat(&[&embedded, &u], 1)
            }
            (Some(_), None) => Err(Error::contract("network was built with a latent input")),
            (None, Some(_)) => Err(Error::contract("network was built without a latent input")),
        }
    }

    pub fn apply(&self, bind: &Binding, y: &Tensor, u: Option<&Tensor>) -> Result<DiagGaussianParams> {
        let e = self.y_embed.apply(bind, y)?;
        let joined = self.join(e, u)?;
        gaussian_from_head(&self.trunk.apply(bind, &joined)?, self.z_latent.0)
    }

    pub fn ddi(
        &self,
        store: &mut ParamStore,
        y: &Tensor,
        u: Option<&Tensor>,
    ) -> Result<DiagGaussianParams> {
        let e = self.y_embed.ddi(store, y)?;
        let joined = self.join(e, u)?;
        gaussian_from_head(&self.trunk.ddi(store, &joined)?, self.z_latent.0)
    }
}

/// Conditional image decoder for p(x | z, y): the latent is upsampled to
/// the output resolution, the conditioning image is embedded (and
/// upsampled if coarser than the output), and both are concatenated
/// channel-wise before a trunk block and the mixture head.
#[derive(Clone)]
pub struct CondImageDecoder {
    z_path: Sequential,
    y_embed: Sequential,
    trunk: Sequential,
    latent: (usize, usize, usize),
    out_channels: usize,
    components: usize,
}

impl CondImageDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        scope: &str,
        latent: (usize, usize, usize),
        y_channels: usize,
        y_hw: (usize, usize),
        out_channels: usize,
        out_hw: (usize, usize),
        components: usize,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        let ups_z = power_of_two_ratio(out_hw.0, latent.1, "latent-to-output height")?;
        if ups_z != power_of_two_ratio(out_hw.1, latent.2, "latent-to-output width")? {
            return Err(Error::config("latent upsampling must match per axis"));
        }
        let ups_y = power_of_two_ratio(out_hw.0, y_hw.0, "conditioning-to-output height")?;
        if ups_y != power_of_two_ratio(out_hw.1, y_hw.1, "conditioning-to-output width")? {
            return Err(Error::config("conditioning upsampling must match per axis"));
        }
        let mut z_path = Vec::new();
        let mut cur = cfg.base_width << ups_z;
        z_path.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.z.stem"),
            latent.0,
            cur,
            1,
            1,
            0,
            rng,
        )?));
        z_path.push(Layer::Elu);
        for s in 0..ups_z {
            let width = cfg.base_width << (ups_z - 1 - s);
            z_path.push(Layer::ConvT(WnConvT2d::build(
                store,
                &format!("{scope}.z.up{s}"),
                cur,
                width,
                4,
                2,
                1,
                rng,
            )?));
            z_path.push(Layer::Elu);
            cur = width;
        }
        let mut y_embed = Vec::new();
        y_embed.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.y.stem"),
            y_channels,
            cfg.base_width,
            3,
            1,
            1,
            rng,
        )?));
        y_embed.push(Layer::Elu);
        for s in 0..ups_y {
            y_embed.push(Layer::ConvT(WnConvT2d::build(
                store,
                &format!("{scope}.y.up{s}"),
                cfg.base_width,
                cfg.base_width,
                4,
                2,
                1,
                rng,
            )?));
            y_embed.push(Layer::Elu);
        }
        let mut trunk = Vec::new();
        let joined = cur + cfg.base_width;
        let width = push_block(store, &mut trunk, &format!("{scope}.trunk"), joined, cfg, rng)?;
        trunk.push(Layer::Conv(WnConv2d::build(
            store,
            &format!("{scope}.head"),
            width,
            3 * out_channels * components,
            1,
            1,
            0,
            rng,
        )?));
        Ok(Self {
            z_path: Sequential { layers: z_path },
            y_embed: Sequential { layers: y_embed },
            trunk: Sequential { layers: trunk },
            latent,
            out_channels,
            components,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn apply(&self, bind: &Binding, z: &Tensor, y: &Tensor) -> Result<MixtureLogisticParams> {
        let (c, h, w) = self.latent;
        let z = z.reshape(&[z.shape()[0], c, h, w])?;
        let zp = self.z_path.apply(bind, &z)?;
        let ye = self.y_embed.apply(bind, y)?;
        let joined = Tensor::concat(&[&zp, &ye], 1)?;
        mixture_from_head(&self.trunk.apply(bind, &joined)?, self.out_channels, self.components)
    }

    pub fn ddi(
        &self,
        store: &mut ParamStore,
        z: &Tensor,
        y: &Tensor,
    ) -> Result<MixtureLogisticParams> {
        let (c, h, w) = self.latent;
        let z = z.reshape(&[z.shape()[0], c, h, w])?;
        let zp = self.z_path.ddi(store, &z)?;
        let ye = self.y_embed.ddi(store, y)?;
        let joined = Tensor::concat(&[&zp, &ye], 1)?;
        mixture_from_head(&self.trunk.ddi(store, &joined)?, self.out_channels, self.components)
    }
}

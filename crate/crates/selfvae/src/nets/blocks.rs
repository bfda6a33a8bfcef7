//! Composite building blocks: densely connected conv blocks and
//! channel-attention gates.

use crate::error::Result;
use crate::nets::layers::WnConv2d;
use crate::store::{Binding, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Densely connected block: every inner 3x3 conv reads the concatenation
/// of the block input and all previous inner outputs, and contributes
/// `growth_rate` new channels. ELU follows every inner conv.
#[derive(Clone)]
pub struct DenseBlock {
    convs: Vec<WnConv2d>,
    c_in: usize,
    growth: usize,
}

impl DenseBlock {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        layers: usize,
        growth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        if growth > 0 {
            for i in 0..layers {
                convs.push(WnConv2d::build(
                    store,
                    &format!("{name}.conv{i}"),
                    c_in + i * growth,
                    growth,
                    3,
                    1,
                    1,
                    rng,
                )?);
            }
        }
        Ok(Self { convs, c_in, growth })
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.convs.len() * self.growth
    }

    pub fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for conv in &self.convs {
            let refs: Vec<&Tensor> = feats.iter().collect();
            let input = Tensor::concat(&refs, 1)?;
            feats.push(conv.apply(bind, &input)?.elu());
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        if refs.len() == 1 {
            return Ok(x.clone());
        }
        Tensor::concat(&refs, 1)
    }

    pub fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for conv in &self.convs {
            let refs: Vec<&Tensor> = feats.iter().collect();
            let input = Tensor::concat(&refs, 1)?;
            feats.push(conv.ddi(store, &input)?.elu());
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        if refs.len() == 1 {
            return Ok(x.clone());
        }
        Tensor::concat(&refs, 1)
    }
}

/// Channel attention: global average pool, a two-layer bottleneck gate,
/// then a sigmoid rescaling of every channel. Shape preserving; since the
/// gate lies in (0, 1), no activation magnitude can grow.
#[derive(Clone)]
pub struct ChannelAttention {
    reduce: WnConv2d,
    expand: WnConv2d,
}

impl ChannelAttention {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        let reduce = WnConv2d::build(store, &format!("{name}.reduce"), channels, hidden, 1, 1, 0, rng)?;
        let expand = WnConv2d::build(store, &format!("{name}.expand"), hidden, channels, 1, 1, 0, rng)?;
        Ok(Self { reduce, expand })
    }

    fn gate(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let pooled = x.global_average_pool()?;
        let h = self.reduce.apply(bind, &pooled)?.elu();
        Ok(self.expand.apply(bind, &h)?.sigmoid())
    }

    pub fn apply(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.gate(bind, x)?)
    }

    /// The gate convs see pooled features, so their init pass runs on the
    /// pooled batch; the gated output is returned for downstream layers.
    pub fn ddi(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let pooled = x.global_average_pool()?;
        let h = self.reduce.ddi(store, &pooled)?.elu();
        let gate = self.expand.ddi(store, &h)?.sigmoid();
        x.mul(&gate)
    }
}

//! Skip-connected autoencoder that grows one resolution level at a time.
//!
//! At level `L` the encoder runs blocks at spatial sizes `L, L/2, …, 64`
//! (each followed by 2×2 average pooling), then a base block at 32. The
//! 18-channel pose stack joins the 32×32 features before the bottleneck
//! block. The decoder mirrors the encoder: nearest upsampling, concatenation
//! with the encoder features of the same size, then a block.

use std::sync::Arc;

use posexfer_tensor::{Float, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{check_level, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, Kind, Module};

pub const BOTTLENECK_SIDE: usize = 32;
pub const MAX_LEVEL: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Every feature width is divided by this (1 keeps the full widths).
    pub width_divisor: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Feature width of blocks at spatial size `s`: `16384 / s` above the
    /// bottleneck, 512 at 32.
    pub fn channels(&self, s: usize) -> usize {
        let full = if s <= BOTTLENECK_SIDE { 512 } else { 16384 / s };
        (full / self.width_divisor.max(1)).max(1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        (1024 / self.width_divisor.max(1)).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Encoder,
    Bottleneck,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub spatial: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub position: Position,
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T: Float = f32> {
    level: usize,
    config: NetworkConfig,
    /// Outermost first: spatial `level, level/2, …, 64`.
    encoder: Vec<ConvBlock<T>>,
    encoder_base: ConvBlock<T>,
    bottleneck: ConvBlock<T>,
    decoder_base: ConvBlock<T>,
    /// Outermost first, mirroring `encoder`.
    decoder: Vec<ConvBlock<T>>,
    rgb_in: Conv2d<T>,
    rgb_out: Conv2d<T>,
}

fn enc_name(s: usize) -> String {
    format!("enc.{s}")
}

fn dec_name(s: usize) -> String {
    format!("dec.{s}")
}

impl<T: Float> Autoencoder<T> {
    pub fn new(level: usize, config: NetworkConfig) -> Result<Self> {
        check_level(level)?;
        let seed = config.seed;
        let c = |s| config.channels(s);
        let mut net = Self {
            level: 64,
            config,
            encoder: vec![ConvBlock::new(&enc_name(64), c(128), c(64), seed)],
            encoder_base: ConvBlock::new("enc.32", c(64), c(32), seed),
            bottleneck: ConvBlock::new(
                "bottleneck",
                c(32) + NUM_KEYPOINTS,
                config.bottleneck_channels(),
                seed,
            ),
            decoder_base: ConvBlock::new("dec.32", config.bottleneck_channels(), c(32), seed),
            decoder: vec![ConvBlock::new(&dec_name(64), c(32) + c(64), c(64), seed)],
            rgb_in: Self::rgb_in(64, &config),
            rgb_out: Self::rgb_out(64, &config),
        };
        while net.level < level {
            net.grow()?;
        }
        Ok(net)
    }

    fn rgb_in(level: usize, config: &NetworkConfig) -> Conv2d<T> {
        Conv2d::new(&format!("rgb_in.{level}"), 3, config.channels(2 * level), 1, 1, false, config.seed)
    }

    fn rgb_out(level: usize, config: &NetworkConfig) -> Conv2d<T> {
        Conv2d::new(&format!("rgb_out.{level}"), config.channels(level), 3, 1, 1, true, config.seed)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Doubles the level: a new outermost encoder/decoder pair with a skip
    /// between them and fresh RGB projections. Existing blocks are untouched.
    pub fn grow(&mut self) -> Result<()> {
        if self.level >= MAX_LEVEL {
            return Err(Error::AtMaximumLevel);
        }
        let s = self.level * 2;
        let cfg = self.config;
        let c = |s| cfg.channels(s);
        self.encoder
            .insert(0, ConvBlock::new(&enc_name(s), c(2 * s), c(s), cfg.seed));
        self.decoder
            .insert(0, ConvBlock::new(&dec_name(s), c(s / 2) + c(s), c(s), cfg.seed));
        self.rgb_in = Self::rgb_in(s, &cfg);
        self.rgb_out = Self::rgb_out(s, &cfg);
        self.level = s;
        Ok(())
    }

    /// Block layout from input to output.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let spec = |b: &ConvBlock<T>, spatial, position| BlockSpec {
            spatial,
            in_channels: b.in_channels(),
            out_channels: b.out_channels(),
            position,
        };
        let sizes = self.spatial_sizes();
        let mut out: Vec<_> = self
            .encoder
            .iter()
            .zip(&sizes)
            .map(|(b, &s)| spec(b, s, Position::Encoder))
            .collect();
        out.push(spec(&self.encoder_base, BOTTLENECK_SIDE, Position::Encoder));
        out.push(spec(&self.bottleneck, BOTTLENECK_SIDE, Position::Bottleneck));
        out.push(spec(&self.decoder_base, BOTTLENECK_SIDE, Position::Decoder));
        out.extend(
            self.decoder
                .iter()
                .zip(&sizes)
                .rev()
                .map(|(b, &s)| spec(b, s, Position::Decoder)),
        );
        out
    }

    /// Encoder output widths from outermost to the base block.
    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.encoder_base))
            .map(ConvBlock::out_channels)
            .collect()
    }

    /// `(encoder spatial size, decoder spatial size)` for each skip connection.
    pub fn skip_connections(&self) -> Vec<(usize, usize)> {
        self.spatial_sizes().into_iter().map(|s| (s, s)).collect()
    }

    fn spatial_sizes(&self) -> Vec<usize> {
        (0..self.encoder.len()).map(|i| self.level >> i).collect()
    }

    /// `x`: `(n, 3, level, level)`; `pose`: `(n, 18, 32, 32)`. Output in `[-1, 1]`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>, pose: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = x.shape();
        let ps = pose.shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != self.level || xs[3] != self.level {
            return Err(Error::ShapeMismatch(format!(
                "input {xs:?} does not match a level-{} model",
                self.level
            )));
        }
        if ps != [xs[0], NUM_KEYPOINTS, BOTTLENECK_SIDE, BOTTLENECK_SIDE] {
            return Err(Error::ShapeMismatch(format!(
                "pose {ps:?}, expected [{}, {NUM_KEYPOINTS}, 32, 32]",
                xs[0]
            )));
        }
        let mut h = self.rgb_in.forward(ctx, x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let f = block.forward(ctx, h);
            skips.push(f);
            h = f.avg_pool2();
        }
        let h = self.encoder_base.forward(ctx, h);
        let h = self.bottleneck.forward(ctx, Var::cat(&[h, pose], 1));
        let mut h = self.decoder_base.forward(ctx, h);
        for (block, skip) in self.decoder.iter().zip(&skips).rev() {
            h = block.forward(ctx, Var::cat(&[h.upsample_nearest(2), *skip], 1));
        }
        Ok(self.rgb_out.forward(ctx, h).tanh())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        self.encoder
            .iter()
            .chain([&self.encoder_base, &self.bottleneck, &self.decoder_base])
            .chain(&self.decoder)
    }

    /// Converts every tensor to another float type.
    pub fn cast<U: Float>(&self) -> Autoencoder<U> {
        let mut out: Autoencoder<U> = Autoencoder::new(self.level, self.config).expect("valid level");
        let src: std::collections::HashMap<_, _> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t, _)| (n, t))
            .collect();
        out.visit_mut(&mut |n, t, _| *t = Arc::new(src[n].cast()));
        out
    }

    /// Overwrites tensors by name; every tensor of the model must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, mut get: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |n, t, _| {
            if err.is_some() {
                return;
            }
            match get(n) {
                Some(v) if v.shape() == t.shape() => *t = Arc::new(v),
                Some(v) => {
                    err = Some(Error::ShapeMismatch(format!(
                        "{n}: stored {:?}, model expects {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::ShapeMismatch(format!("{n} is missing"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: Float> Module<T> for Autoencoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        self.rgb_in.visit(f);
        for b in self.tensors() {
            b.visit(f);
        }
        self.rgb_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        self.rgb_in.visit_mut(f);
        for b in self
            .encoder
            .iter_mut()
            .chain([&mut self.encoder_base, &mut self.bottleneck, &mut self.decoder_base])
            .chain(&mut self.decoder)
        {
            b.visit_mut(f);
        }
        self.rgb_out.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_rule() {
        let c = NetworkConfig::default();
        let widths: Vec<_> = [1024, 512, 256, 128, 64, 32].iter().map(|&s| c.channels(s)).collect();
        assert_eq!(widths, [16, 32, 64, 128, 256, 512]);
    }

    #[test]
    fn level_64_layout() {
        let net = Autoencoder::<f32>::new(64, NetworkConfig::default()).unwrap();
        assert_eq!(net.encoder_channels(), [256, 512]);
        let specs = net.block_specs();
        let bott = specs.iter().find(|b| b.position == Position::Bottleneck).unwrap();
        assert_eq!((bott.in_channels, bott.out_channels), (530, 1024));
        assert_eq!(specs.last().unwrap().out_channels, 256);
        assert_eq!(net.skip_connections(), [(64, 64)]);
    }

    #[test]
    fn grow_past_maximum_fails() {
        let mut net = Autoencoder::<f32>::new(
            1024,
            NetworkConfig {
                width_divisor: 16,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(net.encoder_channels(), [1, 2, 4, 8, 16, 32]);
        assert!(matches!(net.grow(), Err(Error::AtMaximumLevel)));
    }
}

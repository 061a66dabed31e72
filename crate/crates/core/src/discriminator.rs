//! Conditional patch discriminator over descriptor crops.
//!
//! Input is a reference crop and a candidate crop stacked to 6 channels.
//! Stride-2 spectrally normalized 3×3 convolutions halve the side down to 2;
//! a 3×3 head maps to one channel, followed by sigmoid and a spatial mean.

use std::sync::Arc;

use posexfer_tensor::{Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::nn::{param_rng, Conv2d, Ctx, Kind, Module, LEAKY_SLOPE};

pub const DEFAULT_CROP_SIDE: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// On only when the last ladder level is 1024.
    #[default]
    Auto,
    /// On at the last ladder level, whatever it is.
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub enabled: AdversarialMode,
    /// Accept crop sides other than 128 (ladder depth adapts).
    pub allow_any_crop_side: bool,
    pub width_divisor: usize,
    pub seed: u64,
    /// Number of independent discriminators; region `d` uses `d % groups`.
    pub groups: usize,
    /// Weight of the generator's adversarial term.
    pub lambda_adv: f64,
    /// Power-iteration steps per forward.
    pub power_iterations: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            enabled: AdversarialMode::Auto,
            allow_any_crop_side: false,
            width_divisor: 1,
            seed: 7,
            groups: 1,
            lambda_adv: 0.1,
            power_iterations: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn active_at(&self, level: usize, final_level: usize) -> bool {
        level == final_level
            && match self.enabled {
                AdversarialMode::Auto => final_level == 1024,
                AdversarialMode::On => true,
                AdversarialMode::Off => false,
            }
    }
}

/// Conv whose weight is divided by its largest singular value, estimated
/// by power iteration from a persistent vector `u`.
#[derive(Clone, Debug)]
pub struct SpectralConv<T: Float> {
    pub conv: Conv2d<T>,
    pub u: Arc<Tensor<T>>,
}

fn normalize<T: Float>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let n = n.max(T::from_f64_lossy(1e-12));
    v.iter_mut().for_each(|x| *x /= n);
}

impl<T: Float> SpectralConv<T> {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, seed: u64) -> Self {
        let mut u: Tensor<T> = Tensor::randn(&[cout], 1.0, &mut param_rng(seed, &format!("{name}.u")));
        normalize(u.data_mut());
        Self {
            conv: Conv2d::new(name, cin, cout, 3, stride, true, seed),
            u: Arc::new(u),
        }
    }

    /// `n` power-iteration steps from the stored `u`: returns `(u, v, sigma)`.
    pub fn power_iteration(&self, n: usize) -> (Vec<T>, Vec<T>, T) {
        let w = self.conv.weight.data();
        let rows = self.u.numel();
        let cols = w.len() / rows;
        let mut u = self.u.data().to_vec();
        let mut v = vec![T::zero(); cols];
        for _ in 0..n.max(1) {
            v.iter_mut().for_each(|x| *x = T::zero());
            for (i, &ui) in u.iter().enumerate() {
                for (vj, &wij) in v.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                    *vj += wij * ui;
                }
            }
            normalize(&mut v);
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = w[i * cols..(i + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum();
            }
            normalize(&mut u);
        }
        let sigma = u
            .iter()
            .enumerate()
            .map(|(i, &ui)| ui * w[i * cols..(i + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum::<T>())
            .sum();
        (u, v, sigma)
    }

    /// Runs `n` power-iteration steps and keeps the new `u`.
    pub fn refine(&mut self, n: usize) -> T {
        let (u, _, sigma) = self.power_iteration(n);
        self.u = Arc::new(Tensor::from_vec(&[u.len()], u));
        sigma
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>, iters: usize) -> Var<'t, T> {
        let (u, v, sigma) = self.power_iteration(iters);
        let name = &self.conv.name;
        let w = ctx.bind(&format!("{name}.weight"), &self.conv.weight);
        let w = w.spectral_normalize(&u, &v, sigma);
        let y = x.conv2d(&w, self.conv.stride, self.conv.pad);
        let b = ctx.bind(&format!("{name}.bias"), self.conv.bias.as_ref().expect("bias"));
        if ctx.train && !ctx.frozen {
            ctx.updates
                .insert(format!("{name}.u"), Tensor::from_vec(&[u.len()], u));
        }
        y.add_bias(&b)
    }
}

impl<T: Float> Module<T> for SpectralConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        self.conv.visit(f);
        f(&format!("{}.u", self.conv.name), &self.u, Kind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        self.conv.visit_mut(f);
        f(&format!("{}.u", self.conv.name), &mut self.u, Kind::Buffer);
    }
}

#[derive(Clone, Debug)]
pub struct LocalDiscriminator<T: Float = f32> {
    crop_side: usize,
    stages: Vec<SpectralConv<T>>,
    head: SpectralConv<T>,
    power_iterations: usize,
}

/// Ladder widths for a crop side: 64, 128, … doubling per stride-2 stage.
pub fn ladder(crop_side: usize, width_divisor: usize) -> Vec<(usize, usize)> {
    let stages = crop_side.trailing_zeros() as usize - 1;
    (0..stages)
        .map(|i| (((64usize << i) / width_divisor.max(1)).max(1), crop_side >> (i + 1)))
        .collect()
}

impl<T: Float> LocalDiscriminator<T> {
    pub fn new(name: &str, crop_side: usize, config: &DiscriminatorConfig) -> Result<Self> {
        let pow2 = crop_side.is_power_of_two() && crop_side >= 4;
        if !pow2 || (crop_side != DEFAULT_CROP_SIDE && !config.allow_any_crop_side) {
            return Err(Error::UnsupportedCropSide(crop_side));
        }
        let mut cin = 6;
        let mut stages = Vec::new();
        for (i, (c, _)) in ladder(crop_side, config.width_divisor).into_iter().enumerate() {
            stages.push(SpectralConv::new(&format!("{name}.conv{i}"), cin, c, 2, config.seed));
            cin = c;
        }
        Ok(Self {
            crop_side,
            stages,
            head: SpectralConv::new(&format!("{name}.head"), cin, 1, 1, config.seed),
            power_iterations: config.power_iterations.max(1),
        })
    }

    pub fn crop_side(&self) -> usize {
        self.crop_side
    }

    pub fn spectral_convs(&self) -> impl Iterator<Item = &SpectralConv<T>> {
        self.stages.iter().chain(std::iter::once(&self.head))
    }

    pub fn spectral_convs_mut(&mut self) -> impl Iterator<Item = &mut SpectralConv<T>> {
        self.stages.iter_mut().chain(std::iter::once(&mut self.head))
    }

    /// Activation shapes `(channels, side)` after every stage and the head.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut side = self.crop_side;
        self.spectral_convs()
            .map(|s| {
                side = posexfer_tensor::conv_out_size(side, 3, s.conv.stride, s.conv.pad);
                (s.conv.out_channels(), side)
            })
            .collect()
    }

    /// `pair`: `(n, 6, side, side)`. Returns `n` probabilities.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, pair: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = pair.shape();
        if s.len() != 4 || s[1] != 6 || s[2] != self.crop_side || s[3] != self.crop_side {
            return Err(Error::ShapeMismatch(format!(
                "discriminator input {s:?}, expected [n, 6, {0}, {0}]",
                self.crop_side
            )));
        }
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut h = pair;
        for st in &self.stages {
            h = st.forward(ctx, h, self.power_iterations).leaky_relu(slope);
        }
        Ok(self
            .head
            .forward(ctx, h, self.power_iterations)
            .sigmoid()
            .mean_per_sample())
    }

    /// Scores `(reference, candidate)` crop batches of shape `(n, 3, s, s)`.
    pub fn score<'t>(&self, ctx: &mut Ctx<'t, T>, reference: Var<'t, T>, candidate: Var<'t, T>) -> Result<Var<'t, T>> {
        if reference.shape() != candidate.shape() {
            return Err(Error::ShapeMismatch(format!(
                "reference {:?} vs candidate {:?}",
                reference.shape(),
                candidate.shape()
            )));
        }
        self.forward(ctx, Var::cat(&[reference, candidate], 1))
    }
}

impl<T: Float> Module<T> for LocalDiscriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        for s in self.spectral_convs() {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        for s in self.spectral_convs_mut() {
            s.visit_mut(f);
        }
    }
}

/// One discriminator per region group; group `g` scores regions `d` with
/// `d % groups == g`.
#[derive(Clone, Debug)]
pub struct DiscriminatorBank<T: Float = f32> {
    pub members: Vec<LocalDiscriminator<T>>,
}

impl<T: Float> DiscriminatorBank<T> {
    pub fn new(crop_side: usize, config: &DiscriminatorConfig) -> Result<Self> {
        let groups = config.groups.max(1);
        let members = (0..groups)
            .map(|g| {
                let name = if groups == 1 { "disc".to_string() } else { format!("disc.g{g}") };
                LocalDiscriminator::new(&name, crop_side, config)
            })
            .collect::<Result<_>>()?;
        Ok(Self { members })
    }

    pub fn crop_side(&self) -> usize {
        self.members[0].crop_side()
    }

    /// Scores a crop batch where crop `i` belongs to region `regions[i]`;
    /// returns one probability per crop, in input order.
    pub fn score<'t>(
        &self,
        ctx: &mut Ctx<'t, T>,
        reference: Var<'t, T>,
        candidate: Var<'t, T>,
        regions: &[usize],
    ) -> Result<Vec<Var<'t, T>>> {
        let g = self.members.len();
        if g == 1 {
            return Ok(vec![self.members[0].score(ctx, reference, candidate)?]);
        }
        let side = reference.shape()[2];
        let mut out = Vec::new();
        for (k, d) in self.members.iter().enumerate() {
            let idx: Vec<_> = (0..regions.len()).filter(|&i| regions[i] % g == k).collect();
            if idx.is_empty() {
                continue;
            }
            let origins: Vec<_> = idx.iter().map(|&i| (i, 0, 0)).collect();
            let r = reference.crops(&origins, side, side);
            let c = candidate.crops(&origins, side, side);
            out.push(d.score(ctx, r, c)?);
        }
        Ok(out)
    }
}

impl<T: Float> Module<T> for DiscriminatorBank<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        for m in &self.members {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        for m in &mut self.members {
            m.visit_mut(f);
        }
    }
}

/// A single discriminator with the default (128 px) crop contract.
pub fn build_local_discriminator(crop_side: usize, seed: u64) -> Result<LocalDiscriminator<f32>> {
    let cfg = DiscriminatorConfig {
        seed,
        ..Default::default()
    };
    LocalDiscriminator::new("disc", crop_side, &cfg)
}

fn mean_bce<'t, T: Float>(scores: &[Var<'t, T>], target: f64) -> Var<'t, T> {
    let total: usize = scores.iter().map(|s| s.shape()[0]).sum();
    let terms: Vec<_> = scores
        .iter()
        .map(|s| {
            let n = s.shape()[0];
            s.bce(&vec![T::from_f64_lossy(target); n])
                .scale(T::from_f64_lossy(n as f64 / total as f64))
        })
        .collect();
    Var::sum(&terms)
}

/// Binary cross-entropy of real scores against 1 and fake scores against 0,
/// averaged over all scores.
pub fn d_loss_var<'t, T: Float>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Var<'t, T> {
    let nr: usize = real.iter().map(|s| s.shape()[0]).sum();
    let nf: usize = fake.iter().map(|s| s.shape()[0]).sum();
    let n = (nr + nf) as f64;
    let r = mean_bce(real, 1.0).scale(T::from_f64_lossy(nr as f64 / n));
    let f = mean_bce(fake, 0.0).scale(T::from_f64_lossy(nf as f64 / n));
    r.add(&f)
}

/// Non-saturating generator loss: BCE of fake scores against 1.
pub fn g_adv_loss_var<'t, T: Float>(fake: &[Var<'t, T>]) -> Var<'t, T> {
    mean_bce(fake, 1.0)
}

fn crop_var<'t>(tape: &'t Tape<f32>, a: &ImageBuffer) -> Var<'t, f32> {
    tape.constant_tensor(a.to_tensor())
}

/// Probability that `(reference, candidate)` is a valid transfer pair.
pub fn d_score(d: &LocalDiscriminator<f32>, reference: &ImageBuffer, candidate: &ImageBuffer) -> Result<f32> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let p = d.score(&mut ctx, crop_var(&tape, reference), crop_var(&tape, candidate))?;
    Ok(p.value().item())
}

/// Discriminator loss on one real pair `(X_d, X'_d)` and one fake pair `(X_d, X̂_d)`.
pub fn d_loss(d: &LocalDiscriminator<f32>, real: (&ImageBuffer, &ImageBuffer), fake: (&ImageBuffer, &ImageBuffer)) -> Result<f32> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let r = d.score(&mut ctx, crop_var(&tape, real.0), crop_var(&tape, real.1))?;
    let f = d.score(&mut ctx, crop_var(&tape, fake.0), crop_var(&tape, fake.1))?;
    Ok(d_loss_var(&[r], &[f]).value().item())
}

pub fn g_adv_loss(d: &LocalDiscriminator<f32>, fake: (&ImageBuffer, &ImageBuffer)) -> Result<f32> {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let f = d.score(&mut ctx, crop_var(&tape, fake.0), crop_var(&tape, fake.1))?;
    Ok(g_adv_loss_var(&[f]).value().item())
}

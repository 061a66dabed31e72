//! Perceptual losses over a frozen feature extractor.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use posexfer_tensor::{Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;
use crate::descriptors::{DescriptorSet, Rect};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Kind, Module};

pub const PIXEL_TAP: &str = "pixel";
pub const DEFAULT_TAPS: [&str; 5] = [PIXEL_TAP, "relu1_2", "relu2_2", "relu3_2", "relu4_2"];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// VGG16 `features` up to `relu4_2`: `(torchvision index, name, in, out)`;
/// `None` marks a 2×2 max pool.
const VGG16: [Option<(usize, &str, usize, usize)>; 12] = [
    Some((0, "conv1_1", 3, 64)),
    Some((2, "conv1_2", 64, 64)),
    None,
    Some((5, "conv2_1", 64, 128)),
    Some((7, "conv2_2", 128, 128)),
    None,
    Some((10, "conv3_1", 128, 256)),
    Some((12, "conv3_2", 256, 256)),
    Some((14, "conv3_3", 256, 256)),
    None,
    Some((17, "conv4_1", 256, 512)),
    Some((19, "conv4_2", 512, 512)),
];

#[derive(Clone, Debug)]
pub enum Layer<T: Float> {
    /// Convolution followed by ReLU.
    ConvRelu(Conv2d<T>),
    MaxPool,
    /// Records the current activation under a tap name.
    Tap(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Pretrained VGG16 weights (safetensors, torchvision `features.N` names).
    /// Without it the extractor uses seeded random weights.
    pub weights: Option<PathBuf>,
    /// Divides VGG widths for the random extractor; must be 1 when pretrained.
    pub width_divisor: usize,
    pub seed: u64,
    pub taps: Vec<String>,
    /// Inputs smaller than this are nearest-upsampled before extraction.
    pub min_input: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            weights: None,
            width_divisor: 1,
            seed: 1234,
            taps: DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
            min_input: 32,
        }
    }
}

/// Frozen multi-tap feature network. Inputs are images in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Float = f32> {
    layers: Vec<Layer<T>>,
    /// Map `[-1, 1]` to ImageNet-normalized input before the first conv.
    imagenet_normalize: bool,
    min_input: usize,
}

impl<T: Float> FeatureExtractor<T> {
    /// Builds a network from explicit layers. A `Tap` before any conv sees
    /// the raw input.
    pub fn from_layers(layers: Vec<Layer<T>>, imagenet_normalize: bool, min_input: usize) -> Self {
        Self {
            layers,
            imagenet_normalize,
            min_input: min_input.max(1),
        }
    }

    pub fn build(config: &ExtractorConfig) -> Result<Self> {
        for t in &config.taps {
            if !DEFAULT_TAPS.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "unknown tap `{t}`; expected one of {DEFAULT_TAPS:?}"
                )));
            }
        }
        if config.taps.is_empty() {
            return Err(Error::Config("extractor needs at least one tap".into()));
        }
        let weights = match &config.weights {
            None => None,
            Some(weights) => {
                if config.width_divisor != 1 {
                    return Err(Error::Config(
                        "pretrained extractor weights require width_divisor = 1".into(),
                    ));
                }
                Some(load_vgg16_weights(weights)?)
            }
        };
        let div = config.width_divisor.max(1);
        let wanted = |name: &str| config.taps.iter().any(|t| t == name);
        let last = DEFAULT_TAPS
            .iter()
            .rposition(|t| wanted(t))
            .expect("non-empty taps");
        let mut layers = Vec::new();
        if wanted(PIXEL_TAP) {
            layers.push(Layer::Tap(PIXEL_TAP.into()));
        }
        let mut taps_seen = 0;
        for entry in VGG16 {
            if taps_seen == last {
                break;
            }
            match entry {
                None => layers.push(Layer::MaxPool),
                Some((idx, name, cin, cout)) => {
                    let cin = if cin == 3 { 3 } else { (cin / div).max(1) };
                    let cout = (cout / div).max(1);
                    let mut conv = Conv2d::new(&format!("vgg.{name}"), cin, cout, 3, 1, true, config.seed);
                    if let Some(w) = &weights {
                        let get = |suffix: &str| {
                            w.get(&format!("features.{idx}.{suffix}")).cloned().ok_or_else(|| {
                                Error::Config(format!("extractor weights lack features.{idx}.{suffix}"))
                            })
                        };
                        let (wt, bt) = (get("weight")?, get("bias")?);
                        if wt.shape() != conv.weight.shape() || bt.shape() != [cout] {
                            return Err(Error::Config(format!(
                                "extractor weight features.{idx} has shape {:?}",
                                wt.shape()
                            )));
                        }
                        conv.weight = Arc::new(wt.cast());
                        conv.bias = Some(Arc::new(bt.cast()));
                    }
                    layers.push(Layer::ConvRelu(conv));
                    // conv{b}_2 closes the tapped part of each stage.
                    if name.ends_with("_2") {
                        taps_seen += 1;
                        let tap = DEFAULT_TAPS[taps_seen];
                        if wanted(tap) {
                            layers.push(Layer::Tap(tap.into()));
                        }
                    }
                }
            }
        }
        Ok(Self::from_layers(layers, true, config.min_input))
    }

    pub fn min_input(&self) -> usize {
        self.min_input
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Tap(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Tap activations, in layer order. Parameters are bound as constants.
    pub fn features<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let side = x.shape()[2].min(x.shape()[3]);
        let x = if side < self.min_input {
            x.upsample_nearest(self.min_input.div_ceil(side))
        } else {
            x
        };
        let mut taps = Vec::new();
        let mut h = x;
        let mut normalized = !self.imagenet_normalize;
        ctx.with_frozen(|ctx| {
            for layer in &self.layers {
                match layer {
                    Layer::Tap(_) => taps.push(h),
                    Layer::MaxPool => h = h.max_pool2(),
                    Layer::ConvRelu(conv) => {
                        if !normalized {
                            let (scale, shift): (Vec<T>, Vec<T>) = (0..3)
                                .map(|c| {
                                    let s = 0.5 / IMAGENET_STD[c];
                                    let b = (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                                    (T::from_f64_lossy(s), T::from_f64_lossy(b))
                                })
                                .unzip();
                            h = h.channel_affine(&scale, &shift);
                            normalized = true;
                        }
                        h = conv.forward(ctx, h).relu();
                    }
                }
            }
        });
        taps
    }

    pub fn cast<U: Float>(&self) -> FeatureExtractor<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::ConvRelu(c) => Layer::ConvRelu(Conv2d {
                    name: c.name.clone(),
                    weight: Arc::new(c.weight.cast()),
                    bias: c.bias.as_ref().map(|b| Arc::new(b.cast())),
                    stride: c.stride,
                    pad: c.pad,
                }),
                Layer::MaxPool => Layer::MaxPool,
                Layer::Tap(n) => Layer::Tap(n.clone()),
            })
            .collect();
        FeatureExtractor::from_layers(layers, self.imagenet_normalize, self.min_input)
    }
}

impl<T: Float> Module<T> for FeatureExtractor<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        for l in &self.layers {
            if let Layer::ConvRelu(c) = l {
                c.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        for l in &mut self.layers {
            if let Layer::ConvRelu(c) = l {
                c.visit_mut(f);
            }
        }
    }
}

fn load_vgg16_weights(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Config(format!(
        "cannot parse extractor weights {}: {e}",
        path.display()
    )))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if !name.starts_with("features.") {
            continue;
        }
        out.insert(name, crate::checkpoint::tensor_from_view(&view)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Mean squared difference.
    L2,
    /// Mean absolute difference.
    L1,
}

impl Criterion {
    pub fn apply<'t, T: Float>(self, a: &Var<'t, T>, b: &Var<'t, T>) -> Var<'t, T> {
        match self {
            Criterion::L2 => a.mean_sq_diff(b),
            Criterion::L1 => a.mean_abs_diff(b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::L2 => "l2",
            Criterion::L1 => "l1",
        }
    }
}

/// L2 for the first `floor(total / 2)` steps of a level, L1 afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriterionSchedule {
    pub total: u64,
}

impl CriterionSchedule {
    pub fn switch_point(&self) -> u64 {
        self.total / 2
    }

    pub fn criterion(&self, step: u64) -> Result<Criterion> {
        if step >= self.total {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total,
            });
        }
        Ok(if step < self.switch_point() {
            Criterion::L2
        } else {
            Criterion::L1
        })
    }
}

pub fn criterion(step: u64, schedule: &CriterionSchedule) -> Result<Criterion> {
    schedule.criterion(step)
}

fn check_same_shape<T: Float>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `Σ_l crit(φ_l(gt), φ_l(out))`. The ground truth is detached.
pub fn global_perceptual_var<'t, T: Float>(
    ctx: &mut Ctx<'t, T>,
    fx: &FeatureExtractor<T>,
    gt: Var<'t, T>,
    out: Var<'t, T>,
    crit: Criterion,
) -> Result<Var<'t, T>> {
    check_same_shape(&gt, &out)?;
    let fg = fx.features(ctx, gt.detach());
    let fo = fx.features(ctx, out);
    let terms: Vec<_> = fg.iter().zip(&fo).map(|(g, o)| crit.apply(o, g)).collect();
    Ok(Var::sum(&terms))
}

/// Window list for a batch: `(sample, rect)` pairs.
pub fn batch_windows(sets: &[&DescriptorSet]) -> Vec<(usize, Rect)> {
    sets.iter()
        .enumerate()
        .flat_map(|(b, ds)| ds.windows().into_iter().map(move |r| (b, r)))
        .collect()
}

/// `Σ_d Σ_l crit(φ_l(gt_d), φ_l(out_d))`, averaged over samples.
///
/// All crops go through the extractor as one batch; since each tap's
/// criterion is a mean over the crop batch, multiplying by
/// `crops / samples` turns it into the per-sample sum over regions.
pub fn local_perceptual_var<'t, T: Float>(
    ctx: &mut Ctx<'t, T>,
    fx: &FeatureExtractor<T>,
    gt: Var<'t, T>,
    out: Var<'t, T>,
    windows: &[(usize, Rect)],
    crit: Criterion,
) -> Result<Var<'t, T>> {
    check_same_shape(&gt, &out)?;
    let Some(side) = windows.first().map(|w| w.1.side) else {
        return Err(Error::EmptyDescriptors);
    };
    let n = gt.shape()[0];
    let origins: Vec<_> = windows
        .iter()
        .map(|(b, r)| {
            if r.side != side || *b >= n {
                Err(Error::ShapeMismatch("inconsistent descriptor windows".into()))
            } else {
                Ok((*b, r.y0, r.x0))
            }
        })
        .collect::<Result<_>>()?;
    let g = gt.detach().crops(&origins, side, side);
    let o = out.crops(&origins, side, side);
    let per = global_perceptual_var(ctx, fx, g, o, crit)?;
    Ok(per.scale(T::from_f64_lossy(windows.len() as f64 / n as f64)))
}

fn image_var<'t>(tape: &'t Tape<f64>, img: &ImageBuffer) -> Var<'t, f64> {
    tape.constant_tensor(img.to_tensor().cast())
}

fn same_resolution(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::ShapeMismatch(format!(
            "{}px vs {}px images",
            a.side(),
            b.side()
        )));
    }
    Ok(())
}

/// Scalar global perceptual loss, evaluated in double precision.
pub fn global_perceptual(gt: &ImageBuffer, out: &ImageBuffer, fx: &FeatureExtractor<f64>, crit: Criterion) -> Result<f64> {
    same_resolution(gt, out)?;
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let l = global_perceptual_var(&mut ctx, fx, image_var(&tape, gt), image_var(&tape, out), crit)?;
    Ok(l.value().item())
}

pub fn local_perceptual(
    gt: &ImageBuffer,
    out: &ImageBuffer,
    ds: &DescriptorSet,
    fx: &FeatureExtractor<f64>,
    crit: Criterion,
) -> Result<f64> {
    same_resolution(gt, out)?;
    if gt.side() != ds.level {
        return Err(Error::ShapeMismatch(format!(
            "descriptors at {}px, images at {}px",
            ds.level,
            gt.side()
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDescriptors);
    }
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let l = local_perceptual_var(
        &mut ctx,
        fx,
        image_var(&tape, gt),
        image_var(&tape, out),
        &batch_windows(&[ds]),
        crit,
    )?;
    Ok(l.value().item())
}

/// Global plus local perceptual loss, unit weights.
pub fn total_loss(
    gt: &ImageBuffer,
    out: &ImageBuffer,
    ds: &DescriptorSet,
    fx: &FeatureExtractor<f64>,
    crit: Criterion,
) -> Result<f64> {
    Ok(global_perceptual(gt, out, fx, crit)? + local_perceptual(gt, out, ds, fx, crit)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = CriterionSchedule { total: 700_000 };
        assert_eq!(s.criterion(0).unwrap(), Criterion::L2);
        assert_eq!(s.criterion(349_999).unwrap(), Criterion::L2);
        assert_eq!(s.criterion(350_000).unwrap(), Criterion::L1);
        assert_eq!(CriterionSchedule { total: 1 }.criterion(0).unwrap(), Criterion::L1);
        assert!(s.criterion(700_000).is_err());
    }

    #[test]
    fn vgg_tap_shapes() {
        let cfg = ExtractorConfig {
            width_divisor: 16,
            ..Default::default()
        };
        let fx = FeatureExtractor::<f32>::build(&cfg).unwrap();
        assert_eq!(fx.tap_names(), DEFAULT_TAPS);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, false);
        let x = tape.constant_tensor(Tensor::zeros(&[2, 3, 32, 32]));
        let shapes: Vec<_> = fx.features(&mut ctx, x).iter().map(|v| v.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 3, 32, 32],
                vec![2, 4, 32, 32],
                vec![2, 8, 16, 16],
                vec![2, 16, 8, 8],
                vec![2, 32, 4, 4]
            ]
        );
    }

    #[test]
    fn truncates_after_last_tap() {
        let cfg = ExtractorConfig {
            width_divisor: 16,
            taps: vec!["relu2_2".into()],
            ..Default::default()
        };
        let fx = FeatureExtractor::<f32>::build(&cfg).unwrap();
        assert_eq!(fx.tap_names(), ["relu2_2"]);
        let convs = fx
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::ConvRelu(_)))
            .count();
        assert_eq!(convs, 4);
    }
}

//! Layers, parameter bookkeeping and the Adam optimizer.
//!
//! Modules own their tensors. A forward pass binds each tensor onto a
//! [`Ctx`] under its dotted name; gradients and buffer updates are collected
//! by name afterwards, so modules never hold tape references.

use std::collections::HashMap;
use std::sync::Arc;

use posexfer_tensor::{BatchNormMode, Float, Gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Trainable,
    /// State that is saved and restored but never optimized.
    Buffer,
}

/// Named-tensor traversal shared by all modules.
pub trait Module<T: Float> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind));

    fn named_tensors(&self) -> Vec<(String, Arc<Tensor<T>>, Kind)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t, k| out.push((n.to_string(), t.clone(), k)));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, k| {
            if k == Kind::Trainable {
                n += t.numel()
            }
        });
        n
    }

    /// Replaces buffers whose names appear in `updates`.
    fn apply_updates(&mut self, updates: &HashMap<String, Tensor<T>>) {
        self.visit_mut(&mut |n, t, k| {
            if k == Kind::Buffer {
                if let Some(u) = updates.get(n) {
                    *t = Arc::new(u.clone());
                }
            }
        });
    }
}

/// Per-forward state: the tape, mode flags, bound parameters and buffer
/// updates produced in training mode.
pub struct Ctx<'t, T: Float> {
    pub tape: &'t Tape<T>,
    pub train: bool,
    /// Bind parameters as constants; gradients still flow to inputs.
    pub frozen: bool,
    bound: Vec<(String, Var<'t, T>)>,
    pub updates: HashMap<String, Tensor<T>>,
}

impl<'t, T: Float> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, train: bool) -> Self {
        Self {
            tape,
            train,
            frozen: false,
            bound: Vec::new(),
            updates: HashMap::new(),
        }
    }

    pub fn bind(&mut self, name: &str, value: &Arc<Tensor<T>>) -> Var<'t, T> {
        if self.frozen {
            return self.tape.constant(value.clone());
        }
        let v = self.tape.param(value.clone());
        self.bound.push((name.to_string(), v));
        v
    }

    /// Runs `f` with parameters bound as constants.
    pub fn with_frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.frozen;
        self.frozen = true;
        let r = f(self);
        self.frozen = prev;
        r
    }

    /// Gradients keyed by parameter name, summed over repeated bindings.
    pub fn gradients(&self, grads: &Gradients<T>) -> HashMap<String, Tensor<T>> {
        let mut out: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = grads.get(*v) {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.iter().map(|(n, _)| n.as_str())
    }
}

/// FNV-1a, used to give every parameter its own RNG stream.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// He-normal weights: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Float>(shape: &[usize], seed: u64, name: &str) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut param_rng(seed, name))
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub name: String,
    pub weight: Arc<Tensor<T>>,
    pub bias: Option<Arc<Tensor<T>>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        Self {
            weight: Arc::new(he_normal(&[cout, cin, k, k], seed, &wname)),
            bias: bias.then(|| Arc::new(Tensor::zeros(&[cout]))),
            name: name.to_string(),
            stride,
            pad: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.bind(&format!("{}.weight", self.name), &self.weight);
        let y = x.conv2d(&w, self.stride, self.pad);
        match &self.bias {
            Some(b) => y.add_bias(&ctx.bind(&format!("{}.bias", self.name), b)),
            None => y,
        }
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        f(&format!("{}.weight", self.name), &self.weight, Kind::Trainable);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b, Kind::Trainable);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, Kind::Trainable);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b, Kind::Trainable);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Float> {
    pub name: String,
    pub gamma: Arc<Tensor<T>>,
    pub beta: Arc<Tensor<T>>,
    pub running_mean: Arc<Tensor<T>>,
    pub running_var: Arc<Tensor<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Arc::new(Tensor::ones(&[c])),
            beta: Arc::new(Tensor::zeros(&[c])),
            running_mean: Arc::new(Tensor::zeros(&[c])),
            running_var: Arc::new(Tensor::ones(&[c])),
        }
    }

    /// Batch statistics in training mode (running averages are queued on
    /// `ctx`), running statistics otherwise.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let g = ctx.bind(&format!("{}.weight", self.name), &self.gamma);
        let b = ctx.bind(&format!("{}.bias", self.name), &self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        if !ctx.train {
            return x
                .batch_norm(
                    &g,
                    &b,
                    BatchNormMode::Eval {
                        mean: self.running_mean.data(),
                        var: self.running_var.data(),
                        eps,
                    },
                )
                .y;
        }
        let out = x.batch_norm(&g, &b, BatchNormMode::Train { eps });
        if !ctx.frozen {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: Vec<T>| {
                let t = Tensor::from_vec(old.shape(), new);
                old.zip_map(&t, |o, n| (T::one() - m) * o + m * n)
            };
            let mean = blend(&self.running_mean, out.batch_mean.expect("train stats"));
            let var = blend(&self.running_var, out.batch_var.expect("train stats"));
            ctx.updates.insert(format!("{}.running_mean", self.name), mean);
            ctx.updates.insert(format!("{}.running_var", self.name), var);
        }
        out.y
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        f(&format!("{}.weight", self.name), &self.gamma, Kind::Trainable);
        f(&format!("{}.bias", self.name), &self.beta, Kind::Trainable);
        f(&format!("{}.running_mean", self.name), &self.running_mean, Kind::Buffer);
        f(&format!("{}.running_var", self.name), &self.running_var, Kind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        f(&format!("{}.weight", self.name), &mut self.gamma, Kind::Trainable);
        f(&format!("{}.bias", self.name), &mut self.beta, Kind::Trainable);
        f(&format!("{}.running_mean", self.name), &mut self.running_mean, Kind::Buffer);
        f(&format!("{}.running_var", self.name), &mut self.running_var, Kind::Buffer);
    }
}

/// Two `conv3x3 → batch norm → leaky ReLU(0.2)` stages.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Float> {
    pub name: String,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

impl<T: Float> ConvBlock<T> {
    pub fn new(name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, false, seed),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, false, seed),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let h = self.conv1.forward(ctx, x);
        let h = self.bn1.forward(ctx, h).leaky_relu(slope);
        let h = self.conv2.forward(ctx, h);
        self.bn2.forward(ctx, h).leaky_relu(slope)
    }
}

impl<T: Float> Module<T> for ConvBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>, Kind)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>, Kind)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub slots: HashMap<String, AdamSlot<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: HashMap::new(),
        }
    }

    /// One update of every trainable tensor that has a gradient.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &HashMap<String, Tensor<T>>) {
        let c = self.config;
        let f = T::from_f64_lossy;
        let (b1, b2, wd, eps) = (f(c.beta1), f(c.beta2), f(c.weight_decay), f(c.eps));
        let slots = &mut self.slots;
        module.visit_mut(&mut |name, p, kind| {
            if kind != Kind::Trainable {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let slot = slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                step: 0,
            });
            slot.step += 1;
            let t = slot.step as i32;
            let bc2 = f((1.0 - c.beta2.powi(t)).sqrt());
            let step = f(c.lr / (1.0 - c.beta1.powi(t)));
            let w = Arc::make_mut(p);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + wd * *w;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= step * *m / ((*v).sqrt() / bc2 + eps);
            }
        });
    }

    /// Drops moments of tensors the module no longer has.
    pub fn retain_for<M: Module<T> + ?Sized>(&mut self, module: &M) {
        let mut names = std::collections::HashSet::new();
        module.visit(&mut |n, _, _| {
            names.insert(n.to_string());
        });
        self.slots.retain(|k, _| names.contains(k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_scale_and_determinism() {
        let a: Tensor<f64> = he_normal(&[64, 32, 3, 3], 5, "x.weight");
        let b: Tensor<f64> = he_normal(&[64, 32, 3, 3], 5, "x.weight");
        let c: Tensor<f64> = he_normal(&[64, 32, 3, 3], 5, "y.weight");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let var = a.sum_sq() / a.numel() as f64;
        assert!((var - 2.0 / 288.0).abs() < 0.1 * 2.0 / 288.0, "{var}");
    }

    #[test]
    fn adam_matches_reference_update() {
        // One scalar parameter, two steps, hand-computed.
        let mut conv = Conv2d::<f64>::new("c", 1, 1, 1, 1, false, 0);
        conv.weight = Arc::new(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let mut opt = Adam::new(cfg);
        let grads: HashMap<_, _> = [("c.weight".to_string(), Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]))].into();
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=2 {
            opt.step(&mut conv, &grads);
            let g = 2.0 + 0.5 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((conv.weight.data()[0] - w).abs() < 1e-12, "step {t}");
        }
    }
}

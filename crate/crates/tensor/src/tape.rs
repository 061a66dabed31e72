use std::cell::RefCell;
use std::sync::Arc;

use crate::kernels::{self, channel_reduce};
use crate::{Float, Tensor};

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    ChannelAffine {
        x: usize,
        scale: Vec<T>,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Cat {
        parts: Vec<usize>,
        axis: usize,
    },
    Crops {
        x: usize,
        origins: Vec<(usize, usize, usize)>,
        h: usize,
        w: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Sum {
        parts: Vec<usize>,
    },
    MeanSqDiff {
        a: usize,
        b: usize,
    },
    MeanAbsDiff {
        a: usize,
        b: usize,
    },
    MeanAll {
        x: usize,
    },
    MeanPerSample {
        x: usize,
    },
    Bce {
        p: usize,
        target: Vec<T>,
    },
    SpectralNorm {
        w: usize,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    WeightedSum {
        x: usize,
        c: Arc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one reverse sweep.
///
/// Node ids grow monotonically, so iterating ids backwards visits every
/// node after all of its consumers.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Batch-normalization flavour for [`Var::batch_norm`].
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics.
    Train { eps: T },
    /// Normalize with supplied running statistics.
    Eval {
        mean: &'a [T],
        var: &'a [T],
        eps: T,
    },
}

pub struct BatchNormOutput<'t, T> {
    pub y: Var<'t, T>,
    /// Batch mean per channel (training mode only).
    pub batch_mean: Option<Vec<T>>,
    /// Unbiased batch variance per channel (training mode only).
    pub batch_var: Option<Vec<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A trainable leaf. The tensor is shared, not copied.
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn constant_tensor(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward from a non-scalar");
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            let mut acc = |i: usize, g: Tensor<T>| match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) = kernels::conv2d_backward(
                        val(x),
                        val(w),
                        &gy,
                        stride,
                        pad,
                        needs(x),
                        needs(w),
                    );
                    if let Some(dx) = dx {
                        acc(x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(w, dw);
                    }
                }
                &Op::AddBias { x, b } => {
                    if needs(b) {
                        let db = channel_reduce(gy.shape(), |_, i| gy.data()[i]);
                        acc(b, Tensor::from_vec(&[db.len()], db));
                    }
                    if needs(x) {
                        acc(x, gy);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    batch_stats,
                } => {
                    let xv = val(*x);
                    let shape = xv.shape();
                    let hw = shape[2] * shape[3];
                    let c = shape[1];
                    let m = T::from_usize(shape[0] * hw).unwrap();
                    let xhat = |ch: usize, i: usize| (xv.data()[i] - mean[ch]) * invstd[ch];
                    let sum_dy = channel_reduce(shape, |_, i| gy.data()[i]);
                    let sum_dy_xhat = channel_reduce(shape, |ch, i| gy.data()[i] * xhat(ch, i));
                    let g = val(*gamma).data();
                    if needs(*gamma) {
                        acc(*gamma, Tensor::from_vec(&[c], sum_dy_xhat.clone()));
                    }
                    if needs(*beta) {
                        acc(*beta, Tensor::from_vec(&[c], sum_dy.clone()));
                    }
                    if needs(*x) {
                        let mut dx = Tensor::zeros(shape);
                        for (i, d) in dx.data_mut().iter_mut().enumerate() {
                            let ch = (i / hw) % c;
                            let k = g[ch] * invstd[ch];
                            *d = if *batch_stats {
                                k / m
                                    * (m * gy.data()[i]
                                        - sum_dy[ch]
                                        - xhat(ch, i) * sum_dy_xhat[ch])
                            } else {
                                k * gy.data()[i]
                            };
                        }
                        acc(*x, dx);
                    }
                }
                Op::ChannelAffine { x, scale } => {
                    let shape = gy.shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let c = shape[1];
                    let mut dx = gy;
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        *d *= scale[(i / hw) % c];
                    }
                    acc(*x, dx);
                }
                &Op::LeakyRelu { x, slope } => {
                    let dx = val(x).zip_map(&gy, |v, g| if v > T::zero() { g } else { g * slope });
                    acc(x, dx);
                }
                &Op::Tanh { x } => {
                    let dx = node.value.zip_map(&gy, |y, g| g * (T::one() - y * y));
                    acc(x, dx);
                }
                &Op::Sigmoid { x } => {
                    let dx = node.value.zip_map(&gy, |y, g| g * y * (T::one() - y));
                    acc(x, dx);
                }
                &Op::AvgPool2 { x } => {
                    acc(x, kernels::avg_pool2_backward(&gy, val(x).shape()));
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    let dd = dx.data_mut();
                    for (&src, &g) in argmax.iter().zip(gy.data()) {
                        dd[src as usize] += g;
                    }
                    acc(*x, dx);
                }
                &Op::Upsample { x, factor } => {
                    acc(
                        x,
                        kernels::upsample_nearest_backward(&gy, val(x).shape(), factor),
                    );
                }
                Op::Cat { parts, axis } => {
                    let shape = gy.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let pshape = val(p).shape().to_vec();
                        let len = pshape[*axis];
                        if needs(p) {
                            let mut dp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                dp.extend_from_slice(&gy.data()[start..start + len * inner]);
                            }
                            acc(p, Tensor::from_vec(&pshape, dp));
                        }
                        offset += len;
                    }
                }
                Op::Crops { x, origins, h, w } => {
                    let xshape = val(*x).shape().to_vec();
                    let (c, ih, iw) = (xshape[1], xshape[2], xshape[3]);
                    let mut dx = Tensor::zeros(&xshape);
                    let dd = dx.data_mut();
                    let per = c * h * w;
                    for (k, &(n, y0, x0)) in origins.iter().enumerate() {
                        let src = &gy.data()[k * per..(k + 1) * per];
                        for ch in 0..c {
                            for y in 0..*h {
                                let dst = ((n * c + ch) * ih + y0 + y) * iw + x0;
                                let s = (ch * h + y) * w;
                                for xx in 0..*w {
                                    dd[dst + xx] += src[s + xx];
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                &Op::Add { a, b } => {
                    if needs(a) {
                        acc(a, gy.clone());
                    }
                    if needs(b) {
                        acc(b, gy);
                    }
                }
                &Op::Sub { a, b } => {
                    if needs(b) {
                        acc(b, gy.map(|g| -g));
                    }
                    if needs(a) {
                        acc(a, gy);
                    }
                }
                &Op::Scale { x, c } => acc(x, gy.map(|g| g * c)),
                Op::Sum { parts } => {
                    for &p in parts {
                        if needs(p) {
                            acc(p, gy.clone());
                        }
                    }
                }
                &Op::MeanSqDiff { a, b } => {
                    let (av, bv) = (val(a), val(b));
                    let k = gy.item() * T::from_f64_lossy(2.0) / T::from_usize(av.numel()).unwrap();
                    let d = av.zip_map(bv, |x, y| (x - y) * k);
                    if needs(b) {
                        acc(b, d.map(|v| -v));
                    }
                    if needs(a) {
                        acc(a, d);
                    }
                }
                &Op::MeanAbsDiff { a, b } => {
                    let (av, bv) = (val(a), val(b));
                    let k = gy.item() / T::from_usize(av.numel()).unwrap();
                    let d = av.zip_map(bv, |x, y| {
                        if x > y {
                            k
                        } else if x < y {
                            -k
                        } else {
                            T::zero()
                        }
                    });
                    if needs(b) {
                        acc(b, d.map(|v| -v));
                    }
                    if needs(a) {
                        acc(a, d);
                    }
                }
                &Op::MeanAll { x } => {
                    let xv = val(x);
                    let g = gy.item() / T::from_usize(xv.numel()).unwrap();
                    acc(x, Tensor::full(xv.shape(), g));
                }
                &Op::MeanPerSample { x } => {
                    let xv = val(x);
                    let n = xv.shape()[0];
                    let per = xv.numel() / n;
                    let inv = T::one() / T::from_usize(per).unwrap();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        *d = gy.data()[i / per] * inv;
                    }
                    acc(x, dx);
                }
                Op::Bce { p, target } => {
                    let pv = val(*p);
                    let n = T::from_usize(pv.numel()).unwrap();
                    let eps = T::from_f64_lossy(1e-12);
                    let g = gy.item();
                    let mut dp = Tensor::zeros(pv.shape());
                    for ((d, &pi), &t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target) {
                        *d = g * (pi - t) / ((T::one() - pi) * pi).max(eps) / n;
                    }
                    acc(*p, dp);
                }
                Op::SpectralNorm { w, u, v, sigma } => {
                    let out = node.value.as_ref();
                    let inner: T = gy
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&g, &o)| g * o)
                        .sum();
                    let cols = v.len();
                    let mut dw = Tensor::zeros(out.shape());
                    for (i, d) in dw.data_mut().iter_mut().enumerate() {
                        let (r, c) = (i / cols, i % cols);
                        *d = (gy.data()[i] - inner * u[r] * v[c]) / *sigma;
                    }
                    acc(*w, dw);
                }
                Op::WeightedSum { x, c } => {
                    let g = gy.item();
                    acc(*x, c.map(|v| v * g));
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// 2-D cross-correlation without bias. `w` is `[out, in, kh, kw]`.
    pub fn conv2d(&self, w: &Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let y = kernels::conv2d_forward(&self.value(), &w.value(), stride, pad);
        self.binary(
            w,
            y,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        )
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_bias(&self, b: &Var<'t, T>) -> Var<'t, T> {
        let xv = self.value();
        let bv = b.value();
        let (_, c, h, w) = xv.dims4();
        assert_eq!(bv.numel(), c);
        let mut y = (*xv).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / (h * w)) % c];
        }
        self.binary(b, y, Op::AddBias { x: self.id, b: b.id })
    }

    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        mode: BatchNormMode<'_, T>,
    ) -> BatchNormOutput<'t, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let m = n * hw;
        let (mean, invstd, batch_var, batch_stats) = match mode {
            BatchNormMode::Train { eps } => {
                let mf = T::from_usize(m).unwrap();
                let mean: Vec<T> = channel_reduce(&shape, |_, i| xv.data()[i])
                    .into_iter()
                    .map(|s| s / mf)
                    .collect();
                let ss = channel_reduce(&shape, |ch, i| {
                    let d = xv.data()[i] - mean[ch];
                    d * d
                });
                let invstd: Vec<T> = ss.iter().map(|&s| T::one() / (s / mf + eps).sqrt()).collect();
                let unbiased: Vec<T> = ss
                    .iter()
                    .map(|&s| s / T::from_usize(m.saturating_sub(1).max(1)).unwrap())
                    .collect();
                (mean, invstd, Some(unbiased), true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                assert_eq!(mean.len(), c);
                let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), invstd, None, false)
            }
        };
        let g = gamma.value();
        let b = beta.value();
        let mut y = Tensor::zeros(&shape);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (xv.data()[i] - mean[ch]) * invstd[ch] * g.data()[ch] + b.data()[ch];
        }
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        let batch_mean = batch_stats.then(|| mean.clone());
        let y = self.tape.push(
            y,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                invstd,
                batch_stats,
            },
            rg,
        );
        BatchNormOutput {
            y,
            batch_mean,
            batch_var,
        }
    }

    /// `y[c] = x[c] * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&self, scale: &[T], shift: &[T]) -> Var<'t, T> {
        let xv = self.value();
        let (_, c, h, w) = xv.dims4();
        assert!(scale.len() == c && shift.len() == c);
        let mut y = (*xv).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / (h * w)) % c;
            *v = *v * scale[ch] + shift[ch];
        }
        self.unary(
            y,
            Op::ChannelAffine {
                x: self.id,
                scale: scale.to_vec(),
            },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let y = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(y, Op::LeakyRelu { x: self.id, slope })
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let y = self.value().map(|v| v.tanh());
        self.unary(y, Op::Tanh { x: self.id })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(y, Op::Sigmoid { x: self.id })
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&self) -> Var<'t, T> {
        let y = kernels::avg_pool2_forward(&self.value());
        self.unary(y, Op::AvgPool2 { x: self.id })
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2(&self) -> Var<'t, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let xd = xv.data();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for i in [i0 + 1, i0 + w, i0 + w + 1] {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.unary(
            Tensor::from_vec(&[n, c, ho, wo], out),
            Op::MaxPool2 { x: self.id, argmax },
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<'t, T> {
        assert!(factor >= 1);
        let y = kernels::upsample_nearest_forward(&self.value(), factor);
        self.unary(y, Op::Upsample { x: self.id, factor })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn cat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len());
            assert!(
                s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b),
                "cat shape mismatch: {s:?} vs {first:?}"
            );
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        tape.push(Tensor::from_vec(&shape, data), Op::Cat { parts: ids, axis }, rg)
    }

    /// Extracts `h x w` windows; `origins` holds `(sample, y0, x0)` per crop.
    /// The result is `[origins.len(), C, h, w]`.
    pub fn crops(&self, origins: &[(usize, usize, usize)], h: usize, w: usize) -> Var<'t, T> {
        let xv = self.value();
        let (n, c, ih, iw) = xv.dims4();
        let mut data = Vec::with_capacity(origins.len() * c * h * w);
        for &(s, y0, x0) in origins {
            assert!(s < n && y0 + h <= ih && x0 + w <= iw, "crop out of bounds");
            for ch in 0..c {
                for y in 0..h {
                    let start = ((s * c + ch) * ih + y0 + y) * iw + x0;
                    data.extend_from_slice(&xv.data()[start..start + w]);
                }
            }
        }
        self.unary(
            Tensor::from_vec(&[origins.len(), c, h, w], data),
            Op::Crops {
                x: self.id,
                origins: origins.to_vec(),
                h,
                w,
            },
        )
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let y = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, y, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let y = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, y, Op::Sub { a: self.id, b: other.id })
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let y = self.value().map(|v| v * c);
        self.unary(y, Op::Scale { x: self.id, c })
    }

    /// Elementwise sum of equally shaped vars.
    pub fn sum(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let mut y = (*parts[0].value()).clone();
        for p in &parts[1..] {
            y.add_assign(&p.value());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        tape.push(y, Op::Sum { parts: ids }, rg)
    }

    /// `mean((self - other)^2)` as a scalar.
    pub fn mean_sq_diff(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape());
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let y = Tensor::scalar(s / T::from_usize(a.numel()).unwrap());
        self.binary(other, y, Op::MeanSqDiff { a: self.id, b: other.id })
    }

    /// `mean(|self - other|)` as a scalar.
    pub fn mean_abs_diff(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape());
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let y = Tensor::scalar(s / T::from_usize(a.numel()).unwrap());
        self.binary(other, y, Op::MeanAbsDiff { a: self.id, b: other.id })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let xv = self.value();
        let y = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()).unwrap());
        self.unary(y, Op::MeanAll { x: self.id })
    }

    /// Mean over all but the first axis; result is `[N]`.
    pub fn mean_per_sample(&self) -> Var<'t, T> {
        let xv = self.value();
        let n = xv.shape()[0];
        let per = xv.numel() / n;
        let inv = T::one() / T::from_usize(per).unwrap();
        let data = xv.data().chunks(per).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        self.unary(Tensor::from_vec(&[n], data), Op::MeanPerSample { x: self.id })
    }

    /// Mean binary cross-entropy of probabilities against fixed targets.
    /// Log terms are clamped at -100.
    pub fn bce(&self, target: &[T]) -> Var<'t, T> {
        let pv = self.value();
        assert_eq!(pv.numel(), target.len());
        let floor = T::from_f64_lossy(-100.0);
        let s: T = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| -(t * p.ln().max(floor) + (T::one() - t) * (T::one() - p).ln().max(floor)))
            .sum();
        let y = Tensor::scalar(s / T::from_usize(pv.numel()).unwrap());
        self.unary(
            y,
            Op::Bce {
                p: self.id,
                target: target.to_vec(),
            },
        )
    }

    /// Divides a weight by `sigma = u^T W v`, with `u`, `v` held fixed.
    /// `W` is viewed as `[shape[0], numel / shape[0]]`.
    pub fn spectral_normalize(&self, u: &[T], v: &[T], sigma: T) -> Var<'t, T> {
        let wv = self.value();
        assert_eq!(u.len(), wv.shape()[0]);
        assert_eq!(u.len() * v.len(), wv.numel());
        let inv = T::one() / sigma;
        let y = wv.map(|x| x * inv);
        self.unary(
            y,
            Op::SpectralNorm {
                w: self.id,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        )
    }

    /// `sum(self * c)` as a scalar.
    pub fn weighted_sum(&self, c: Arc<Tensor<T>>) -> Var<'t, T> {
        let xv = self.value();
        assert_eq!(xv.shape(), c.shape());
        let s: T = xv.data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum();
        self.unary(Tensor::scalar(s), Op::WeightedSum { x: self.id, c })
    }
}

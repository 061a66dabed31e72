//! Forward and backward kernels on raw NCHW buffers.

use crate::{Float, Tensor};

/// Row-major GEMM on contiguous buffers: `C = alpha * op(A) op(B) + beta * C`.
///
/// `op(A)` is `m x k` and `op(B)` is `k x n`. With `trans_a` the buffer `a`
/// holds a `k x m` matrix; with `trans_b` the buffer `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above, strides describe dense row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (c, h, wd) = (x[1], x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        assert_eq!(c, w[1], "conv input has {c} channels, weight expects {}", w[1]);
        Self {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: conv_out_size(h, kh, stride, pad),
            wo: conv_out_size(wd, kw, stride, pad),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kj - pad` is in range
/// (stride 1).
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
    (lo, hi)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.col_cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            line[lo..hi].copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                        }
                        continue;
                    }
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let hw = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        let line = &src[oy * g.wo..(oy + 1) * g.wo];
                        for (d, v) in dst[lo + kj - g.pad..hi + kj - g.pad].iter_mut().zip(&line[lo..hi]) {
                            *d += *v;
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Samples per GEMM call: enough to keep matrices wide when feature maps
/// are small, bounded so the column buffer stays under ~32 MB of f32.
fn chunk_len(g: &ConvGeom, n: usize) -> usize {
    const COL_BUDGET: usize = 8 << 20;
    let per = (g.col_rows() * g.col_cols()).max(1);
    (COL_BUDGET / per).clamp(1, n.max(1))
}

/// Lays out samples `[b0, b0+len)` as columns `[k, len * hw]`.
fn gather_cols<T: Float>(x: &[T], g: &ConvGeom, b0: usize, len: usize, cols: &mut [T]) {
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let width = len * hw;
    if len == 1 && !g.is_pointwise() {
        im2col(&x[b0 * in_per..(b0 + 1) * in_per], g, &mut cols[..k * hw]);
        return;
    }
    let mut tmp = vec![T::zero(); if g.is_pointwise() { 0 } else { k * hw }];
    for j in 0..len {
        let xs = &x[(b0 + j) * in_per..(b0 + j + 1) * in_per];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut tmp);
            &tmp
        };
        for r in 0..k {
            cols[r * width + j * hw..r * width + (j + 1) * hw]
                .copy_from_slice(&src[r * hw..(r + 1) * hw]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let n = x.dims4().0;
    let o = w.dims4().0;
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
    let od = out.data_mut();
    let chunk = chunk_len(&g, n);
    if chunk == 1 {
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * hw }];
        for b in 0..n {
            let xs = &x.data()[b * in_per..(b + 1) * in_per];
            let rhs: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let dst = &mut od[b * o * hw..(b + 1) * o * hw];
            gemm(false, false, o, hw, k, T::one(), w.data(), rhs, T::zero(), dst);
        }
        return out;
    }
    let mut cols = vec![T::zero(); k * hw * chunk];
    let mut tmp = vec![T::zero(); o * hw * chunk];
    for b0 in (0..n).step_by(chunk) {
        let len = chunk.min(n - b0);
        let width = len * hw;
        gather_cols(x.data(), &g, b0, len, &mut cols);
        gemm(false, false, o, width, k, T::one(), w.data(), &cols[..k * width], T::zero(), &mut tmp[..o * width]);
        for j in 0..len {
            for oc in 0..o {
                od[((b0 + j) * o + oc) * hw..((b0 + j) * o + oc + 1) * hw]
                    .copy_from_slice(&tmp[oc * width + j * hw..oc * width + (j + 1) * hw]);
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = x.dims4().0;
    let o = w.dims4().0;
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let pointwise = g.is_pointwise();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let chunk = chunk_len(&g, n);
    let mut cols = vec![T::zero(); if need_dw { k * hw * chunk } else { 0 }];
    let mut dcols = vec![T::zero(); if need_dx { k * hw * chunk } else { 0 }];
    let mut gyc = vec![T::zero(); if chunk > 1 { o * hw * chunk } else { 0 }];
    for b0 in (0..n).step_by(chunk) {
        let len = chunk.min(n - b0);
        let width = len * hw;
        let gys: &[T] = if chunk == 1 {
            &gy.data()[b0 * o * hw..(b0 + 1) * o * hw]
        } else {
            for j in 0..len {
                for oc in 0..o {
                    gyc[oc * width + j * hw..oc * width + (j + 1) * hw].copy_from_slice(
                        &gy.data()[((b0 + j) * o + oc) * hw..((b0 + j) * o + oc + 1) * hw],
                    );
                }
            }
            &gyc[..o * width]
        };
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if chunk == 1 && pointwise {
                &x.data()[b0 * in_per..(b0 + 1) * in_per]
            } else {
                gather_cols(x.data(), &g, b0, len, &mut cols);
                &cols[..k * width]
            };
            gemm(false, true, o, k, width, T::one(), gys, rhs, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            gemm(true, false, k, width, o, T::one(), w.data(), gys, T::zero(), &mut dcols[..k * width]);
            for j in 0..len {
                let dxs = &mut dx.data_mut()[(b0 + j) * in_per..(b0 + j + 1) * in_per];
                if pointwise && len == 1 {
                    dxs.copy_from_slice(&dcols[..k * hw]);
                } else if len == 1 {
                    col2im_add(&dcols[..k * hw], &g, dxs);
                } else {
                    let mut one = vec![T::zero(); k * hw];
                    for r in 0..k {
                        one[r * hw..(r + 1) * hw]
                            .copy_from_slice(&dcols[r * width + j * hw..r * width + (j + 1) * hw]);
                    }
                    if pointwise {
                        dxs.copy_from_slice(&one);
                    } else {
                        col2im_add(&one, &g, dxs);
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub(crate) fn avg_pool2_forward<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Float>(gy: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = Tensor::zeros(x_shape);
    let gd = gy.data();
    for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let src = &gd[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    dx
}

pub(crate) fn upsample_nearest_forward<T: Float>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Float>(
    gy: &Tensor<T>,
    x_shape: &[usize],
    f: usize,
) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h * f, w * f);
    let mut dx = Tensor::zeros(x_shape);
    let gd = gy.data();
    for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let src = &gd[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / f) * w + xx / f] += src[y * wo + xx];
            }
        }
    }
    dx
}

/// Per-channel sums over batch and space of an NCHW buffer.
pub(crate) fn channel_reduce<T: Float>(
    shape: &[usize],
    mut f: impl FnMut(usize, usize) -> T,
) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut acc = vec![T::zero(); c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            let mut s = T::zero();
            for i in base..base + hw {
                s += f(ch, i);
            }
            *a += s;
        }
    }
    acc
}

//! Image quality metrics. Inputs are `[-1, 1]` images, remapped to `[0, 1]`.

use posexfer_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;
use crate::descriptors::{extract_crops, DescriptorSet};
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, PIXEL_TAP};
use crate::nn::Ctx;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_SIDE: usize = 176;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    pub local_ssim: f64,
    pub perceptual_distance: f64,
    pub n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_region: Option<Vec<f64>>,
}

/// Normalized 1-D Gaussian of length `n`.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let n = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(n, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, ..) = filter(a, h, w, &g);
    let (mu_b, ..) = filter(b, h, w, &g);
    let (saa, ..) = filter(&prod(a, a), h, w, &g);
    let (sbb, ..) = filter(&prod(b, b), h, w, &g);
    let (sab, ..) = filter(&prod(a, b), h, w, &g);
    let m = mu_a.len() as f64;
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        c += cs;
        s += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
    }
    (s / m, c / m)
}

fn unit_planes(img: &ImageBuffer) -> Vec<Vec<f64>> {
    let n = img.side() * img.side();
    img.data()
        .chunks(n)
        .map(|p| p.iter().map(|&v| (v as f64 + 1.0) / 2.0).collect())
        .collect()
}

fn same_side(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::ShapeMismatch(format!(
            "{}px vs {}px images",
            a.side(),
            b.side()
        )));
    }
    Ok(())
}

/// Gaussian-window SSIM averaged over channels. Windows shrink to the image
/// side for images smaller than 11 px.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_side(a, b)?;
    let s = a.side();
    let (pa, pb) = (unit_planes(a), unit_planes(b));
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, s, s).0).sum::<f64>() / 3.0)
}

fn pool2(p: &[f64], s: usize) -> Vec<f64> {
    let h = s / 2;
    let mut out = vec![0.0; h * h];
    for y in 0..h {
        for x in 0..h {
            let i = 2 * y * s + 2 * x;
            out[y * h + x] = (p[i] + p[i + 1] + p[i + s] + p[i + s + 1]) / 4.0;
        }
    }
    out
}

/// Five-scale MS-SSIM with 2×2 average pooling between scales.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_side(a, b)?;
    if a.side() < MS_SSIM_MIN_SIDE {
        return Err(Error::TooSmall {
            got: a.side(),
            min: MS_SSIM_MIN_SIDE,
        });
    }
    let (pa, pb) = (unit_planes(a), unit_planes(b));
    let mut total = 0.0;
    for (mut x, mut y) in pa.into_iter().zip(pb) {
        let mut s = a.side();
        let mut v = 1.0;
        for (i, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ss, cs) = ssim_plane(&x, &y, s, s);
            if i + 1 == MS_SSIM_WEIGHTS.len() {
                v *= ss.max(0.0).powf(*w);
            } else {
                v *= cs.max(0.0).powf(*w);
                x = pool2(&x, s);
                y = pool2(&y, s);
                s /= 2;
            }
        }
        total += v;
    }
    Ok(total / 3.0)
}

/// Mean SSIM over descriptor crops, with the per-region scores.
pub fn local_ssim_regions(a: &ImageBuffer, b: &ImageBuffer, ds: &DescriptorSet) -> Result<(f64, Vec<f64>)> {
    same_side(a, b)?;
    if ds.is_empty() {
        return Err(Error::EmptyDescriptors);
    }
    let ca = extract_crops(a, ds)?;
    let cb = extract_crops(b, ds)?;
    let scores = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| ssim(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

pub fn local_ssim(a: &ImageBuffer, b: &ImageBuffer, ds: &DescriptorSet) -> Result<f64> {
    Ok(local_ssim_regions(a, b, ds)?.0)
}

fn channel_normalized(t: &Tensor<f32>) -> Vec<f64> {
    let (n, c, h, w) = t.dims4();
    let plane = h * w;
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for s in 0..n {
        for p in 0..plane {
            let idx = |k: usize| (s * c + k) * plane + p;
            let norm = (0..c).map(|k| (d[idx(k)] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
            for k in 0..c {
                out[idx(k)] = d[idx(k)] as f64 / norm;
            }
        }
    }
    out
}

/// Unit-weighted LPIPS-style distance: for each feature tap (the pixel tap
/// excluded), the mean squared difference of channel-normalized activations,
/// averaged over taps.
pub fn perceptual_distance(a: &ImageBuffer, b: &ImageBuffer, fx: &FeatureExtractor<f32>) -> Result<f64> {
    same_side(a, b)?;
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let fa = fx.features(&mut ctx, tape.constant_tensor(a.to_tensor()));
    let fb = fx.features(&mut ctx, tape.constant_tensor(b.to_tensor()));
    let names = fx.tap_names();
    let mut acc = 0.0;
    let mut taps = 0;
    for ((name, x), y) in names.iter().zip(&fa).zip(&fb) {
        if *name == PIXEL_TAP {
            continue;
        }
        let (x, y) = (channel_normalized(&x.value()), channel_normalized(&y.value()));
        acc += x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
        taps += 1;
    }
    if taps == 0 {
        return Err(Error::Config("perceptual distance needs a feature tap besides the pixel tap".into()));
    }
    Ok(acc / taps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let a = ImageBuffer::new(16, (0..768).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_rejects_small_inputs() {
        let a = ImageBuffer::filled(64, 0.0);
        assert!(matches!(ms_ssim(&a, &a), Err(Error::TooSmall { got: 64, min: 176 })));
    }
}

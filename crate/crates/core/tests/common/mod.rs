#![allow(dead_code)]

use std::path::{Path, PathBuf};

use posexfer::config::TrainConfig;
use posexfer::data::{ImageBuffer, Keypoint, KeypointSet, NUM_KEYPOINTS};
use posexfer::synthetic::{write_dataset, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, side: usize) -> ImageBuffer {
    ImageBuffer::new(side, (0..3 * side * side).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap()
}

pub fn full_keypoints(rng: &mut ChaCha8Rng, side: usize) -> KeypointSet {
    let hi = side as f32 - 1.0;
    let pts = [(); NUM_KEYPOINTS].map(|_| Keypoint {
        x: rng.gen_range(0.0..=hi),
        y: rng.gen_range(0.0..=hi),
        confidence: 1.0,
    });
    KeypointSet::new(pts, (side, side)).unwrap()
}

pub fn dataset(dir: &Path, subjects: usize, frames: usize) -> PathBuf {
    write_dataset(
        dir,
        &SyntheticConfig {
            subjects,
            frames,
            side: 128,
            seed: 11,
        },
    )
    .unwrap()
}

/// A small, fast configuration over `manifest`.
pub fn tiny_config(manifest: &Path, out: &Path, levels: &[usize], iterations: u64) -> TrainConfig {
    let levels: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
    let text = format!(
        r#"
version = 1
[data]
manifest = "{}"
out_dir = "{}"
prefetch = true
[model]
width_divisor = 64
[extractor]
width_divisor = 32
taps = ["pixel", "relu1_2", "relu2_2"]
[schedule]
levels = [{}]
iterations_per_level = {iterations}
checkpoint_every = 0
[schedule.batch_size]
64 = 2
128 = 1
"#,
        manifest.display(),
        out.display(),
        levels.join(", ")
    );
    let cfg = TrainConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Largest relative error between `analytic` and central differences of
/// `f` at `count` random entries of `x` (all entries when `count` is 0).
pub fn fd_check(
    x: &posexfer::tensor::Tensor<f64>,
    analytic: &posexfer::tensor::Tensor<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&posexfer::tensor::Tensor<f64>) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let n = x.numel();
    let idx: Vec<usize> = if count == 0 || count >= n {
        (0..n).collect()
    } else {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in idx {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// SSIM by direct summation over every valid 11x11 window position.
pub fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let s = a.side();
    let n = 11.min(s);
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let z: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let px = |img: &ImageBuffer, ch, y, x| (img.at(ch, y, x) as f64 + 1.0) / 2.0;
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=s - n {
            for x0 in 0..=s - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = g[i] * g[j];
                        let (p, q) = (px(a, ch, y0 + i, x0 + j), px(b, ch, y0 + i, x0 + j));
                        ma += w * p;
                        mb += w * q;
                        saa += w * p * p;
                        sbb += w * q * q;
                        sab += w * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

/// Brute force: the window is the first in-bounds square, scanning
/// origins outward, that minimizes the distance to the ideal origin.
pub fn window_oracle(cx: f32, cy: f32, level: usize) -> (usize, usize) {
    let side = level / 8;
    let ideal = |c: f32| c.round() as i64 - (side / 2) as i64;
    let best = |ideal: i64| {
        (0..=(level - side) as i64)
            .min_by_key(|o| (o - ideal).abs())
            .unwrap() as usize
    };
    (best(ideal(cx)), best(ideal(cy)))
}

//! Procedural stick-figure datasets for smoke tests and desk-scale runs.
//!
//! Each subject has a fixed palette (background, skin, shirt, sleeves,
//! trousers); each frame draws a new random pose.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBuffer, Keypoint, KeypointSet, NUM_KEYPOINTS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub subjects: usize,
    pub frames: usize,
    /// Side of the written PNGs.
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            subjects: 8,
            frames: 2,
            side: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub background: [f32; 3],
    pub skin: [f32; 3],
    pub shirt: [f32; 3],
    pub sleeves: [f32; 3],
    pub trousers: [f32; 3],
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [0; 3].map(|_| rng.gen_range(-0.85f32..0.85))
}

impl Palette {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let background = color(rng);
        // Keep the figure distinguishable from the background.
        let mut fg = || loop {
            let c = color(rng);
            if c.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum::<f32>() > 0.9 {
                return c;
            }
        };
        Self {
            skin: fg(),
            shirt: fg(),
            sleeves: fg(),
            trousers: fg(),
            background,
        }
    }
}

fn at(origin: (f32, f32), len: f32, angle: f32) -> (f32, f32) {
    (origin.0 + len * angle.sin(), origin.1 + len * angle.cos())
}

/// A random upright pose in `side × side` pixel coordinates, all 18 joints
/// present. Angles are measured from straight down.
pub fn random_pose(rng: &mut ChaCha8Rng, side: usize) -> KeypointSet {
    let s = side as f32;
    let cx = 0.5 + rng.gen_range(-0.08..0.08);
    let cy = rng.gen_range(-0.04..0.04);
    let p = |x: f32, y: f32| (x * s, (y + cy) * s);
    let neck = p(cx, 0.28);
    let nose = p(cx, 0.19);
    let r_sh = p(cx - 0.1, 0.3);
    let l_sh = p(cx + 0.1, 0.3);
    let r_hip = p(cx - 0.065, 0.56);
    let l_hip = p(cx + 0.065, 0.56);
    let (upper, fore, thigh, shin) = (0.14 * s, 0.13 * s, 0.17 * s, 0.16 * s);

    let ra = rng.gen_range(0.05..1.6f32);
    let la = rng.gen_range(0.05..1.6f32);
    let r_el = at(r_sh, upper, -ra);
    let l_el = at(l_sh, upper, la);
    let r_wr = at(r_el, fore, -ra - rng.gen_range(-0.6..1.2f32));
    let l_wr = at(l_el, fore, la + rng.gen_range(-0.6..1.2f32));
    let rl = rng.gen_range(0.0..0.4f32);
    let ll = rng.gen_range(0.0..0.4f32);
    let r_kn = at(r_hip, thigh, -rl);
    let l_kn = at(l_hip, thigh, ll);
    let r_an = at(r_kn, shin, -rl + rng.gen_range(-0.3..0.2f32));
    let l_an = at(l_kn, shin, ll - rng.gen_range(-0.3..0.2f32));

    let r_eye = (nose.0 - 0.025 * s, nose.1 - 0.02 * s);
    let l_eye = (nose.0 + 0.025 * s, nose.1 - 0.02 * s);
    let r_ear = (nose.0 - 0.05 * s, nose.1 - 0.005 * s);
    let l_ear = (nose.0 + 0.05 * s, nose.1 - 0.005 * s);

    let joints = [
        nose, neck, r_sh, r_el, r_wr, l_sh, l_el, l_wr, r_hip, r_kn, r_an, l_hip, l_kn, l_an, r_eye, l_eye, r_ear,
        l_ear,
    ];
    let hi = s - 1.0;
    let points: [Keypoint; NUM_KEYPOINTS] = joints.map(|(x, y)| Keypoint {
        x: x.clamp(0.0, hi),
        y: y.clamp(0.0, hi),
        confidence: 1.0,
    });
    KeypointSet::new(points, (side, side)).expect("pose lies inside the image")
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Draws the figure for `kp` (at its source resolution) with `palette`.
/// Missing joints drop the limbs they anchor.
pub fn render_figure(kp: &KeypointSet, palette: &Palette) -> Result<ImageBuffer> {
    let (h, w) = kp.source_resolution();
    if h != w {
        return Err(Error::ShapeMismatch(format!("figures are square, got {h}x{w}")));
    }
    let side = h;
    let s = side as f32;
    let pt = |k: usize| {
        let j = kp.get(k);
        j.is_present().then_some((j.x, j.y))
    };
    let mid = |a: Option<(f32, f32)>, b: Option<(f32, f32)>| Some(((a?.0 + b?.0) / 2.0, (a?.1 + b?.1) / 2.0));
    // Back to front: (a, b, radius, colour).
    let mut shapes: Vec<((f32, f32), (f32, f32), f32, [f32; 3])> = Vec::new();
    let mut push = |a: Option<(f32, f32)>, b: Option<(f32, f32)>, r: f32, c: [f32; 3]| {
        if let (Some(a), Some(b)) = (a, b) {
            shapes.push((a, b, r * s, c));
        }
    };
    let hips = mid(pt(8), pt(11));
    for (a, b) in [(8, 9), (9, 10), (11, 12), (12, 13)] {
        push(pt(a), pt(b), 0.035, palette.trousers);
    }
    push(pt(8), pt(11), 0.04, palette.trousers);
    push(pt(1), hips, 0.085, palette.shirt);
    push(pt(2), pt(5), 0.04, palette.shirt);
    for (a, b) in [(2, 3), (5, 6)] {
        push(pt(a), pt(b), 0.03, palette.shirt);
    }
    for (a, b) in [(3, 4), (6, 7)] {
        push(pt(a), pt(b), 0.026, palette.sleeves);
    }
    push(pt(1), pt(0), 0.025, palette.skin);
    push(pt(0), pt(0), 0.06, palette.skin);
    for k in [4, 7] {
        push(pt(k), pt(k), 0.03, palette.skin);
    }
    for k in [14, 15] {
        push(pt(k), pt(k), 0.009, palette.background);
    }

    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..side {
        for x in 0..side {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut c = palette.background;
            for &(a, b, r, col) in &shapes {
                let alpha = (r - segment_distance(p, a, b) + 0.5).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for i in 0..3 {
                        c[i] += alpha * (col[i] - c[i]);
                    }
                }
            }
            for i in 0..3 {
                data[i * plane + y * side + x] = c[i].clamp(-1.0, 1.0);
            }
        }
    }
    ImageBuffer::new(side, data)
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    subject_id: &'a str,
    frame_id: &'a str,
    image: &'a str,
    keypoints: &'a str,
}

/// Writes PNGs, keypoint files and `manifest.jsonl` into `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig) -> Result<PathBuf> {
    if cfg.subjects == 0 || cfg.frames < 2 {
        return Err(Error::Config(format!(
            "a dataset needs at least one subject with two frames, got {} x {}",
            cfg.subjects, cfg.frames
        )));
    }
    if cfg.side < 16 {
        return Err(Error::TooSmall { got: cfg.side, min: 16 });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let manifest = dir.join("manifest.jsonl");
    let mut lines = Vec::new();
    for s in 0..cfg.subjects {
        let subject = format!("s{s:03}");
        let palette = Palette::random(&mut rng);
        let sub_dir = dir.join(&subject);
        fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
        for f in 0..cfg.frames {
            let frame = format!("f{f:03}");
            let kp = random_pose(&mut rng, cfg.side);
            let image = format!("{subject}/{frame}.png");
            let keypoints = format!("{subject}/{frame}.json");
            render_figure(&kp, &palette)?.save_png(&dir.join(&image))?;
            let kp_path = dir.join(&keypoints);
            let json = serde_json::to_string(&kp.to_triples()).expect("triples serialize");
            fs::write(&kp_path, json).map_err(|e| Error::io(&kp_path, e))?;
            let line = ManifestLine {
                subject_id: &subject,
                frame_id: &frame,
                image: &image,
                keypoints: &keypoints,
            };
            lines.push(serde_json::to_string(&line).expect("record serializes"));
        }
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

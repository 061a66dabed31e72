//! Gaussian pose maps: one channel per keypoint.

use posexfer_tensor::Tensor;

use crate::data::{Keypoint, KeypointSet, NUM_KEYPOINTS};
use crate::error::{Error, Result};

/// Default spread, in grid units of the rendered stack.
pub const DEFAULT_SIGMA: f32 = 3.2;

/// `18 × h × w` maps in `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    grid: (usize, usize),
    sigma: f32,
    maps: Vec<f32>,
}

impl HeatmapStack {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn maps(&self) -> &[f32] {
        &self.maps
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.grid.0 * self.grid.1;
        &self.maps[k * n..(k + 1) * n]
    }

    /// Value of channel `k` at row `y`, column `x`.
    pub fn at(&self, k: usize, y: usize, x: usize) -> f32 {
        self.channel(k)[y * self.grid.1 + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, NUM_KEYPOINTS, self.grid.0, self.grid.1], self.maps.clone())
    }

    /// All-zero stack, the encoding of a pose with no detected joints.
    pub fn zeros(grid: (usize, usize), sigma: f32) -> Self {
        Self {
            grid,
            sigma,
            maps: vec![0.0; NUM_KEYPOINTS * grid.0 * grid.1],
        }
    }
}

/// Renders `exp(-|p - u(k)|^2 / (2 sigma^2))` per present keypoint.
///
/// Pixel `(x, y)` sits at integer coordinates, so a keypoint at an integer
/// position peaks at exactly 1. `kp` must already be expressed in `grid`.
pub fn render_heatmaps(kp: &KeypointSet, grid: (usize, usize), sigma: f32) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(sigma));
    }
    if kp.source_resolution() != grid {
        return Err(Error::ShapeMismatch(format!(
            "keypoints are in {:?} pixels but the grid is {:?}",
            kp.source_resolution(),
            grid
        )));
    }
    let (h, w) = grid;
    let mut out = HeatmapStack::zeros(grid, sigma);
    let inv = 1.0 / (2.0 * sigma as f64 * sigma as f64);
    for (k, p) in kp.points().iter().enumerate() {
        if !p.is_present() {
            continue;
        }
        let (ux, uy) = (p.x as f64, p.y as f64);
        // The Gaussian is separable: exp(-(dx^2 + dy^2) c) = ex[x] * ey[y].
        let ex: Vec<f64> = (0..w).map(|x| (-(x as f64 - ux).powi(2) * inv).exp()).collect();
        let ey: Vec<f64> = (0..h).map(|y| (-(y as f64 - uy).powi(2) * inv).exp()).collect();
        let ch = &mut out.maps[k * h * w..(k + 1) * h * w];
        for (y, row) in ch.chunks_mut(w).enumerate() {
            for (v, e) in row.iter_mut().zip(&ex) {
                *v = (ey[y] * e) as f32;
            }
        }
    }
    Ok(out)
}

/// Scales `kp` to `grid` and renders it.
pub fn render_at(kp: &KeypointSet, grid: (usize, usize), sigma: f32) -> Result<HeatmapStack> {
    render_heatmaps(&kp.scale(grid)?, grid, sigma)
}

/// Per-channel argmax; all-zero channels come back as missing joints.
///
/// The recovered confidence is the peak value.
pub fn heatmap_argmax(stack: &HeatmapStack) -> KeypointSet {
    let (_, w) = stack.grid;
    let mut points = [Keypoint::MISSING; NUM_KEYPOINTS];
    for (k, p) in points.iter_mut().enumerate() {
        let ch = stack.channel(k);
        let (i, &m) = ch
            .iter()
            .enumerate()
            .fold((0, &0.0f32), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        if m > 0.0 {
            *p = Keypoint {
                x: (i % w) as f32,
                y: (i / w) as f32,
                confidence: m.min(1.0),
            };
        }
    }
    KeypointSet::new(points, stack.grid).expect("argmax positions lie on the grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(k: usize, x: f32, y: f32, grid: (usize, usize)) -> KeypointSet {
        let mut pts = [Keypoint::MISSING; NUM_KEYPOINTS];
        pts[k] = Keypoint { x, y, confidence: 1.0 };
        KeypointSet::new(pts, grid).unwrap()
    }

    #[test]
    fn peak_and_one_sigma() {
        let s = render_heatmaps(&single(4, 10.0, 7.0, (32, 32)), (32, 32), 3.2).unwrap();
        assert_eq!(s.at(4, 7, 10), 1.0);
        let r = s.at(4, 7, 10 + 3) as f64;
        let expect = (-(9.0f64) / (2.0 * 3.2f64 * 3.2)).exp();
        assert!((r - expect).abs() < 1e-7);
        assert!(s.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_sigma_and_grid() {
        let kp = single(0, 1.0, 1.0, (32, 32));
        assert!(matches!(render_heatmaps(&kp, (32, 32), 0.0), Err(Error::InvalidSigma(_))));
        assert!(matches!(render_heatmaps(&kp, (16, 16), 1.0), Err(Error::ShapeMismatch(_))));
    }
}

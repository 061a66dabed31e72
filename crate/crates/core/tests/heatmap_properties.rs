use posexfer::data::{Keypoint, KeypointSet, NUM_KEYPOINTS};
use posexfer::heatmap::{heatmap_argmax, render_heatmaps, DEFAULT_SIGMA};
use proptest::prelude::*;

fn one(k: usize, x: f32, y: f32, grid: usize) -> KeypointSet {
    let mut pts = [Keypoint::MISSING; NUM_KEYPOINTS];
    pts[k] = Keypoint { x, y, confidence: 1.0 };
    KeypointSet::new(pts, (grid, grid)).unwrap()
}

proptest! {
    #[test]
    fn values_fall_off_with_distance(
        x in 0.0f32..31.0, y in 0.0f32..31.0, sigma in 0.5f32..8.0,
        p in (0usize..32, 0usize..32), q in (0usize..32, 0usize..32),
    ) {
        let h = render_heatmaps(&one(0, x, y, 32), (32, 32), sigma).unwrap();
        let d = |(px, py): (usize, usize)| (px as f32 - x).powi(2) + (py as f32 - y).powi(2);
        let (vp, vq) = (h.at(0, p.1, p.0), h.at(0, q.1, q.0));
        if d(p) < d(q) {
            prop_assert!(vp >= vq);
        }
        prop_assert!((0.0..=1.0).contains(&vp));
    }

    #[test]
    fn argmax_recovers_integer_keypoints(
        coords in prop::collection::vec((0u8..32, 0u8..32, any::<bool>()), NUM_KEYPOINTS),
        sigma in 0.5f32..6.0,
    ) {
        let pts: [Keypoint; NUM_KEYPOINTS] = std::array::from_fn(|i| {
            let (x, y, present) = coords[i];
            if present {
                Keypoint { x: x as f32, y: y as f32, confidence: 1.0 }
            } else {
                Keypoint::MISSING
            }
        });
        let kp = KeypointSet::new(pts, (32, 32)).unwrap();
        let back = heatmap_argmax(&render_heatmaps(&kp, (32, 32), sigma).unwrap());
        prop_assert_eq!(back, kp);
    }

    #[test]
    fn rendering_is_translation_equivariant(x in 8u8..24, y in 8u8..24, dx in -4i8..4, dy in -4i8..4) {
        let a = render_heatmaps(&one(3, x as f32, y as f32, 32), (32, 32), DEFAULT_SIGMA).unwrap();
        let (bx, by) = (x as i32 + dx as i32, y as i32 + dy as i32);
        let b = render_heatmaps(&one(3, bx as f32, by as f32, 32), (32, 32), DEFAULT_SIGMA).unwrap();
        for yy in 8..24i32 {
            for xx in 8..24i32 {
                prop_assert_eq!(a.at(3, yy as usize, xx as usize), b.at(3, (yy + dy as i32) as usize, (xx + dx as i32) as usize));
            }
        }
    }
}

#[test]
fn missing_joints_render_zero_channels() {
    let h = render_heatmaps(&one(5, 10.0, 10.0, 32), (32, 32), DEFAULT_SIGMA).unwrap();
    for k in (0..NUM_KEYPOINTS).filter(|&k| k != 5) {
        assert!(h.channel(k).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn bad_sigma_and_grid_are_rejected() {
    let kp = one(0, 1.0, 1.0, 32);
    assert!(render_heatmaps(&kp, (32, 32), 0.0).is_err());
    assert!(render_heatmaps(&kp, (32, 32), f32::NAN).is_err());
    assert!(render_heatmaps(&kp, (64, 64), 1.0).is_err());
}

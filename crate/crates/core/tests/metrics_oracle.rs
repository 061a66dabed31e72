mod common;

use posexfer::data::ImageBuffer;
use posexfer::losses::{ExtractorConfig, FeatureExtractor};
use posexfer::metrics::{local_ssim, ms_ssim, perceptual_distance, ssim};
use posexfer::descriptors::build_descriptors;
use rand::Rng;

#[test]
fn ssim_matches_direct_summation_on_random_pairs() {
    let mut rng = common::rng(50);
    for _ in 0..50 {
        let a = common::random_image(&mut rng, 16);
        // Correlated partner so scores spread over the whole range.
        let t: f32 = rng.gen_range(0.0..1.0);
        let b: Vec<f32> = a
            .data()
            .iter()
            .map(|&v| (t * v + (1.0 - t) * rng.gen_range(-1.0f32..1.0)).clamp(-1.0, 1.0))
            .collect();
        let b = ImageBuffer::new(16, b).unwrap();
        let (lib, oracle) = (ssim(&a, &b).unwrap(), common::naive_ssim(&a, &b));
        assert!((lib - oracle).abs() <= 1e-6, "{lib} vs {oracle}");
    }
}

#[test]
fn small_images_shrink_the_window() {
    let mut rng = common::rng(7);
    let (a, b) = (common::random_image(&mut rng, 8), common::random_image(&mut rng, 8));
    assert!((ssim(&a, &b).unwrap() - common::naive_ssim(&a, &b)).abs() <= 1e-6);
}

#[test]
fn identical_images_are_perfect() {
    let mut rng = common::rng(8);
    let a = common::random_image(&mut rng, 64);
    let fx = FeatureExtractor::<f32>::build(&ExtractorConfig { width_divisor: 16, ..Default::default() }).unwrap();
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert_eq!(perceptual_distance(&a, &a, &fx).unwrap(), 0.0);
    let b = common::random_image(&mut rng, 64);
    assert!(perceptual_distance(&a, &b, &fx).unwrap() > 0.0);
    let kp = common::full_keypoints(&mut rng, 64);
    let ds = build_descriptors(&kp, 64).unwrap();
    assert_eq!(local_ssim(&a, &a, &ds).unwrap(), 1.0);
}

#[test]
fn ms_ssim_is_one_on_identity_and_bounded() {
    let mut rng = common::rng(9);
    let a = common::random_image(&mut rng, 256);
    let b = common::random_image(&mut rng, 256);
    assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let v = ms_ssim(&a, &b).unwrap();
    assert!((0.0..1.0).contains(&v));
}

#[test]
fn mismatched_sides_are_rejected() {
    let a = ImageBuffer::filled(16, 0.0);
    let b = ImageBuffer::filled(32, 0.0);
    assert!(ssim(&a, &b).is_err());
}

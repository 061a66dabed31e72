//! Pose-guided appearance transfer.
//!
//! A reference image and a target pose (18 keypoints rendered as Gaussian
//! maps) go through a skip-connected autoencoder that is trained one
//! resolution level at a time, from 64² up to 1024². Training minimizes a
//! perceptual loss on the whole image plus the same loss on keypoint-anchored
//! crops; at the top level the crop term becomes an adversarial one.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod descriptors;
pub mod discriminator;
pub mod error;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use posexfer_tensor as tensor;

//! 3D-to-2D generative pre-training for point-cloud encoders.
//!
//! A point cloud is encoded into per-center features, a pose-conditioned
//! cross-attention module arranges them into a 2D feature grid for an
//! instructed camera pose, and a transposed-convolution generator decodes
//! that grid into the view image. The encoder trained this way is then
//! reused for classification.

pub mod error;
pub mod ndcompute;

pub use error::{Error, Result};
pub mod geometry;
pub mod dataset;
pub mod renderer;
pub mod backbone;
pub mod photograph;
pub mod decoder2d;
pub mod objective;
pub mod model;
pub mod trainer;
pub mod selftest;

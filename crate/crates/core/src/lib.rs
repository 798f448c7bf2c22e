//! Self-supervised camera self-calibration by photometric bundle adjustment.
//!
//! Recovers pinhole intrinsics (and per-frame ego-motion) from an image
//! sequence alone: a coarse trainable inverse-depth grid and per-pair SE(3)
//! twists are optimized jointly with a 4-parameter intrinsic vector by
//! minimizing photometric reconstruction error under differentiable inverse
//! warping. Synthetic planar scenes with known intrinsics provide the
//! ground truth for validation.
//!
//! Module map:
//! - [`image`]: dense images, bilinear sampling with derivatives, pyramids, PNM/PFM I/O
//! - [`camera`]: normalized intrinsic parameters, pinhole projection with Jacobians
//! - [`geometry`]: SE(3) poses and the twist exponential with exact point Jacobians
//! - [`synthesis`]: differentiable view synthesis (warp fields + inverse warping)
//! - [`objective`]: photometric/smoothness losses, analytic gradient, FD oracle
//! - [`optimizer`]: Adam over packed parameter vectors with per-group scaling
//! - [`scene`]: analytic planar-scene renderer for ground-truth sequences
//! - [`engine`]: problem assembly, depth-grid realization, coarse-to-fine calibration
//! - [`eval`]: monocular depth metrics and median scaling
//! - [`gradcheck`]: seeded random problems for gradient verification

pub mod camera;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod objective;
pub mod optimizer;
pub mod scene;
pub mod synthesis;

pub use error::{Error, Result};

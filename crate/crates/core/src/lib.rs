//! Desk-scale multilevel LiDAR–camera fusion for long-range HD map
//! generation.
//!
//! The crate covers the full chain: camera geometry and depth supervision,
//! lift-splat camera-to-BEV, image-guided LiDAR BEV prediction with
//! cross-attention, flow-field BEV alignment, the training losses, map
//! vectorization, range-interval evaluation, and DWA planning over generated
//! maps. Synthetic scenes stand in for real sensor logs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bev;
pub mod btf;
pub mod camera;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod map;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod planner;
pub mod synth;
pub mod tensor;
pub mod vectorize;

pub use error::{BevError, Result};
pub use tensor::{GradPair, Tensor};

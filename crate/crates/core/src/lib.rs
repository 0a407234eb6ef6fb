//! Homogeneous 3D detection and visual grounding from multi-view RGB-D,
//! at desk scale.
//!
//! One set of object queries, one transformer decoder and one box head serve
//! both tasks. Grounding adds a text-driven attention block with a per-voxel
//! relevance head over the fused voxel features, and a sentence-conditioned
//! affine modulation of the initial queries.
//!
//! Pipeline: synthetic scene ([`scene`]) → depth back-projection, voxelization
//! and multi-view feature sampling ([`geometry`]) → network ([`network`]) →
//! Hungarian-matched set losses ([`losses`]) → IoU-thresholded average
//! precision ([`eval`]). [`tensor`] supplies the reverse-mode gradients.

pub mod boxes;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};

//! Snapshot depth from a time-of-flight sensor and an image-stabilized stereo
//! pair.
//!
//! The pipeline decodes dual-frequency ToF measurements into metric depth
//! with a per-pixel confidence ([`tof`]), calibrates the floating main camera
//! for every snapshot from ToF-anchored 2D/3D correspondences ([`calib`]),
//! and fuses stereo and ToF by splatting ToF samples into a stereo cost
//! volume ([`fusion`]). [`synth`] renders deterministic synthetic snapshots
//! with exact ground truth for all of the above.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod matching;
pub mod pfm;
pub mod seed;
pub mod synth;
pub mod tof;
